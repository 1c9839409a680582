"""Command-line interface: config in, CSV/JSON out.

Subcommands::

    exact         absorption-solve q(sample) at each rho
    mc            Monte Carlo estimate of q(sample) at each rho
    asymptotic    q_infty, the first-order coefficient and the
                  coupling-failure coefficients (closed forms)
    couple-stats  empirical coupling-event tallies at each rho
    validate      full rho sweep joining Monte Carlo, exact solve and
                  the expansion

Exit codes: 0 ok, 2 config/usage error, 3 resource cap exceeded,
4 internal error.  Tables are CSV with fixed headers; nested results are
JSON with the allele-label table echoed.  Outputs are written atomically,
so a failed run leaves no partial files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile

from .asymptotics import (
    SingleSiteQ,
    prob_bad1_total,
    prob_bad1_witness,
    prob_bad2_total,
    prob_bad2_witness,
    q1,
    q_infty,
)
from .dynamics import SimulationCapError, simulate
from .exact import StateCapError, absorption_value
from .model import ConfigError, LoadedConfig, dump_normalized, load_config
from .montecarlo import estimate_coupling, estimate_q, rho_sweep
from .types import byte_mask, observed_sites, sites, type_entries

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RESOURCE = 3
EXIT_INTERNAL = 4

MC_HEADER = ["rho", "q_mc", "q_mc_stderr", "reps", "seed"]
EXACT_HEADER = ["rho", "q_exact"]
SWEEP_HEADER = [
    "rho",
    "q_mc",
    "q_mc_stderr",
    "q_exact",
    "q_infty",
    "q1",
    "scaled_residual_mc",
    "scaled_residual_exact",
]


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _rho_list(text: str) -> list[float]:
    out = []
    for piece in text.split(","):
        value = float(piece)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"rho values must be positive, got {piece}")
        out.append(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recoal",
        description="coalescent-with-recombination sampling probabilities: "
        "simulation, exact solves and strong-recombination asymptotics",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("exact", "exact sampling probability by absorption solve"),
        ("mc", "Monte Carlo estimate of the sampling probability"),
        ("asymptotic", "closed-form expansion terms and event coefficients"),
        ("couple-stats", "empirical coupling-event statistics"),
        ("validate", "full rho sweep: MC vs exact vs expansion"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="model config (JSON)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--reps", type=_positive_int, default=100_000)
        rho_group = p.add_mutually_exclusive_group()
        rho_group.add_argument("--rho", type=float, help="override config rho (single value)")
        rho_group.add_argument(
            "--rho-sweep", type=_rho_list, metavar="A,B,C", help="override config rho list"
        )
        p.add_argument("--out", help="output file (CSV for tables, JSON for nested results)")
        p.add_argument("--threads", type=_positive_int, default=1, help="worker processes")
        p.add_argument("--state-cap", type=_positive_int, default=1_000_000)
        p.add_argument("--verbose-events", action="store_true", help="stream per-event debug lines")
        p.add_argument(
            "--dump-normalized",
            action="store_true",
            help="emit the canonical form of the config and exit",
        )
    return parser


def _pick_rhos(cfg: LoadedConfig, args) -> list[float]:
    if args.rho is not None:
        if args.rho <= 0:
            raise ConfigError([f"--rho must be positive, got {args.rho}"])
        return [args.rho]
    if args.rho_sweep is not None:
        return list(args.rho_sweep)
    return list(cfg.rhos)


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".recoal-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(value) -> object:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return value


def _csv_text(header: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row.get(k)) for k in header})
    return buf.getvalue()


def _render_type(x: int, labels) -> dict[str, object]:
    out = {}
    for site, mask in type_entries(x):
        names = [labels[site][a] for a in range(len(labels[site])) if mask >> a & 1]
        out[str(site)] = names[0] if len(names) == 1 else names
    return out


def _print_events(cfg: LoadedConfig, rho: float, seed: int, reps: int) -> None:
    model = cfg.model.with_rho(rho)
    for k in range(min(reps, 5)):
        out = simulate(cfg.sample, model, ((seed & (2**64 - 1)) << 64) | k, dynamics="coupled")
        for ev in out.events or []:
            print(
                f"# rho={rho} rep={k} t={ev.time:.6g} {ev.chain} {ev.kind.value}"
                f" site={ev.site} first_nonrec={int(ev.first_nonrecombination)}"
                f" participants={[hex(p) for p in ev.participants]}",
                file=sys.stderr,
            )


def cmd_exact(cfg: LoadedConfig, rhos, args) -> str:
    rows = []
    for rho in rhos:
        value = absorption_value(cfg.sample, cfg.model.with_rho(rho), "marg", args.state_cap)
        rows.append({"rho": rho, "q_exact": float(value)})
        print(f"rho={rho:g}  q_exact={value:.12g}")
    return _csv_text(EXACT_HEADER, rows)


def cmd_mc(cfg: LoadedConfig, rhos, args) -> str:
    rows = []
    for rho in rhos:
        if args.verbose_events:
            _print_events(cfg, rho, args.seed, args.reps)
        est = estimate_q(
            cfg.sample, cfg.model.with_rho(rho), args.reps, seed=args.seed, workers=args.threads
        )
        rows.append(
            {
                "rho": rho,
                "q_mc": est.mean,
                "q_mc_stderr": est.stderr,
                "reps": est.reps,
                "seed": est.seed,
            }
        )
        print(f"rho={rho:g}  q_mc={est.mean:.12g} +- {est.stderr:.3g}  ({est.reps} reps)")
    return _csv_text(MC_HEADER, rows)


def cmd_asymptotic(cfg: LoadedConfig, rhos, args) -> str:
    model = cfg.model
    sample = cfg.sample
    ssq = SingleSiteQ(model, state_cap=args.state_cap)
    qi = q_infty(sample, ssq)
    q1v = q1(sample, model, ssq)
    spec = model.recombination
    bad1 = []
    seen = set()
    for y, _ in sample.items:
        d = observed_sites(y)
        sub = d
        while True:
            x = y & byte_mask(sub)
            if sub.bit_count() >= 2 and x not in seen:
                seen.add(x)
                coeff = prob_bad1_witness(sample, x, spec)
                if coeff:
                    bad1.append(
                        {
                            "sites": [i for i in sites(observed_sites(x))],
                            "type": _render_type(x, model.allele_labels),
                            "coeff": coeff,
                        }
                    )
            if sub == 0:
                break
            sub = (sub - 1) & d
    bad2 = []
    for x_i, _ in sample.split_to_sites().items:
        site = observed_sites(x_i).bit_length() - 1
        allele = ((x_i >> (8 * site)) & 0xFF).bit_length() - 1
        coeff = prob_bad2_witness(sample, site, allele, spec)
        if coeff:
            bad2.append(
                {
                    "site": site,
                    "allele": model.allele_labels[site][allele],
                    "coeff": coeff,
                }
            )
    result = {
        "labels": [list(a) for a in model.allele_labels],
        "q_infty": qi,
        "q1": q1v,
        "rho": list(rhos),
        "q_first_order": {str(r): qi + q1v / r for r in rhos},
        "bad1_total_coeff": prob_bad1_total(sample, spec),
        "bad2_total_coeff": prob_bad2_total(sample, spec),
        "bad1_witness_coeffs": bad1,
        "bad2_witness_coeffs": bad2,
    }
    print(f"q_infty={qi:.12g}  q1={q1v:.12g}")
    return json.dumps(result, indent=2) + "\n"


def cmd_couple_stats(cfg: LoadedConfig, rhos, args) -> str:
    model = cfg.model
    rows = []
    for rho in rhos:
        if args.verbose_events:
            _print_events(cfg, rho, args.seed, args.reps)
        stats = estimate_coupling(
            cfg.sample, model.with_rho(rho), args.reps, seed=args.seed, workers=args.threads
        )
        def _stat(es):
            return {
                "count": es.count,
                "freq": es.freq,
                "freq_stderr": es.freq_stderr,
                "mean_q_left": es.mean_q_left,
                "stderr_q_left": es.stderr_q_left,
                "mean_q_right": es.mean_q_right,
                "stderr_q_right": es.stderr_q_right,
            }

        rows.append(
            {
                "rho": rho,
                "reps": stats.reps,
                "seed": stats.seed,
                "q_left_mean": stats.q_left.mean,
                "q_left_stderr": stats.q_left.stderr,
                "q_right_mean": stats.q_right.mean,
                "q_right_stderr": stats.q_right.stderr,
                "q1_hat": stats.q1_hat.mean,
                "q1_hat_stderr": stats.q1_hat.stderr,
                "events": {name: _stat(es) for name, es in stats.events.items()},
                "bad1_witnesses": [
                    {
                        "sites": [i for i in sites(ov)],
                        "type": _render_type(x, model.allele_labels),
                        **_stat(es),
                    }
                    for (ov, x), es in stats.bad1_witnesses.items()
                ],
                "bad2_witnesses": [
                    {
                        "site": site,
                        "alleles": [
                            model.allele_labels[site][a]
                            for a in range(len(model.allele_labels[site]))
                            if mask >> a & 1
                        ],
                        **_stat(es),
                    }
                    for (site, mask), es in stats.bad2_witnesses.items()
                ],
            }
        )
        ev = stats.events
        print(
            f"rho={rho:g}  P(coupling failed)={ev['bad'].freq:.3g}"
            f"  P(bad first)={ev['bad_first'].freq:.3g}"
            f"  q1_hat={stats.q1_hat.mean:.6g} +- {stats.q1_hat.stderr:.2g}"
        )
    return json.dumps({"labels": [list(a) for a in cfg.model.allele_labels], "rows": rows}, indent=2) + "\n"


def cmd_validate(cfg: LoadedConfig, rhos, args) -> str:
    rows = rho_sweep(
        cfg.sample,
        cfg.model,
        rhos,
        args.reps,
        seed=args.seed,
        workers=args.threads,
        state_cap=args.state_cap,
    )
    out_rows = []
    for row in rows:
        out_rows.append(row.as_dict())
        exact_txt = "n/a" if row.q_exact is None else f"{row.q_exact:.10g}"
        print(
            f"rho={row.rho:g}  q_mc={row.q_mc:.8g}  q_exact={exact_txt}"
            f"  q_infty={row.q_infty:.10g}  q1={row.q1:.10g}"
            f"  rho*(q_mc-q_infty)={row.scaled_residual_mc:.6g}"
        )
    return _csv_text(SWEEP_HEADER, out_rows)


COMMANDS = {
    "exact": cmd_exact,
    "mc": cmd_mc,
    "asymptotic": cmd_asymptotic,
    "couple-stats": cmd_couple_stats,
    "validate": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.dump_normalized:
            _write_text(args.out, json.dumps(dump_normalized(cfg), indent=2) + "\n")
            return EXIT_OK
        rhos = _pick_rhos(cfg, args)
        text = COMMANDS[args.command](cfg, rhos, args)
        if args.out:
            _write_text(args.out, text)
        elif args.command in ("exact", "mc", "validate"):
            pass  # table already summarised on stdout; no file requested
        else:
            sys.stdout.write(text)
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StateCapError, SimulationCapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except Exception as exc:  # noqa: BLE001 - boundary: report and signal exit 4
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
