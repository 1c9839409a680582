"""Model assembly and JSON config ingestion.

A :class:`Model` bundles the validated mutation kernels and the
recombination spec for a fixed number of sites.  Configs are plain JSON;
site indices are 0-based and allele labels are interned to 0-based indices
in file order (the label table is echoed into outputs).

Validation collects *all* problems before failing, so a config author sees
every cap violation, stochasticity defect, reducible kernel and
inseparable site pair in one pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .mutation import MutationKernel, MutationModel, ReducibleKernelError
from .partitions import (
    InseparableSitesError,
    Partition,
    RecombinationSpec,
    single_crossover,
)
from .types import MAX_ALLELES, MAX_SITES, CountingMeasure, exact_type, type_entries

DEFAULT_RHO = 1.0


class ConfigError(ValueError):
    """Config validation failure carrying the full list of problems."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))


@dataclass(frozen=True)
class Model:
    """Validated site/mutation/recombination model (sample kept separately)."""

    n: int
    allele_labels: tuple[tuple[str, ...], ...]
    mutation: MutationModel
    recombination: RecombinationSpec

    @property
    def rho(self) -> float:
        return self.recombination.rho

    def with_rho(self, rho: float) -> "Model":
        return Model(self.n, self.allele_labels, self.mutation, self.recombination.with_rho(rho))

    def allele_index(self, site: int, label: str) -> int:
        try:
            return self.allele_labels[site].index(str(label))
        except ValueError:
            raise KeyError(f"unknown allele {label!r} at site {site}") from None


@dataclass(frozen=True)
class LoadedConfig:
    model: Model
    sample: CountingMeasure
    rhos: tuple[float, ...]


def _parse_alleles(raw, errors: list[str]) -> list[tuple[str, ...]]:
    labels: list[tuple[str, ...]] = []
    if not isinstance(raw, list) or not raw:
        errors.append("'alleles' must be a nonempty list (one entry per site)")
        return labels
    for i, entry in enumerate(raw):
        if isinstance(entry, int):
            if entry < 1:
                errors.append(f"site {i}: allele count must be >= 1")
                entry = 1
            labels.append(tuple(str(a) for a in range(entry)))
        elif isinstance(entry, list) and entry:
            if len(set(map(str, entry))) != len(entry):
                errors.append(f"site {i}: duplicate allele labels")
            labels.append(tuple(str(a) for a in entry))
        else:
            errors.append(f"site {i}: 'alleles' entry must be a count or a nonempty label list")
            labels.append(("0",))
        if len(labels[-1]) > MAX_ALLELES:
            errors.append(f"site {i}: {len(labels[-1])} alleles exceeds cap {MAX_ALLELES}")
    return labels


def _parse_recombination(raw, n: int, rho: float, errors: list[str]) -> RecombinationSpec | None:
    try:
        if raw is None:
            if n == 1:
                return RecombinationSpec(1, [], rho)
            errors.append("'recombination' is required for more than one site")
            return None
        if "preset" in raw:
            if raw["preset"] != "single_crossover":
                errors.append(f"unknown recombination preset {raw['preset']!r}")
                return None
            return single_crossover(n, [float(r) for r in raw["rates"]], rho)
        parts = []
        for k, term in enumerate(raw["partitions"]):
            blocks = term["blocks"]
            for b in blocks:
                for site in b:
                    if not 0 <= int(site) < n:
                        raise ValueError(f"partition {k}: site {site} out of range 0..{n - 1}")
            parts.append((Partition.from_lists(blocks), float(term["r"])))
        return RecombinationSpec(n, parts, rho)
    except InseparableSitesError as exc:
        errors.append(str(exc))
    except (KeyError, TypeError, ValueError) as exc:
        errors.append(f"recombination: {exc}")
    return None


def parse_config(raw: dict) -> LoadedConfig:
    """Validate a config dict; raises :class:`ConfigError` listing every problem."""
    errors: list[str] = []

    labels = _parse_alleles(raw.get("alleles"), errors)
    n = len(labels)
    if "sites" in raw and raw["sites"] != n:
        errors.append(f"'sites' is {raw['sites']} but 'alleles' lists {n} sites")
    if n > MAX_SITES:
        errors.append(f"{n} sites exceeds cap {MAX_SITES}")
    if errors:
        raise ConfigError(errors)

    rhos_raw = raw.get("rho", DEFAULT_RHO)
    if not isinstance(rhos_raw, list):
        rhos_raw = [rhos_raw]
    rhos: list[float] = []
    for r in rhos_raw:
        try:
            r = float(r)
            if r <= 0:
                raise ValueError
            rhos.append(r)
        except (TypeError, ValueError):
            errors.append(f"rho values must be positive reals, got {r!r}")
    if not rhos:
        errors.append("'rho' must contain at least one value")

    kernels: list[MutationKernel] = []
    mut_raw = raw.get("mutation")
    if not isinstance(mut_raw, list) or len(mut_raw) != n:
        errors.append(f"'mutation' must list one kernel per site ({n} expected)")
    else:
        for i, entry in enumerate(mut_raw):
            try:
                M = entry["M"]
                if len(M) != len(labels[i]):
                    raise ValueError(
                        f"matrix is {len(M)}x{len(M[0]) if M else 0} but site has "
                        f"{len(labels[i])} alleles"
                    )
                kernels.append(MutationKernel.from_rows(float(entry["u"]), M))
            except (KeyError, TypeError, ValueError) as exc:
                errors.append(f"mutation, site {i}: {exc}")

    spec = _parse_recombination(raw.get("recombination"), n, rhos[0] if rhos else DEFAULT_RHO, errors)

    model = None
    if not errors and spec is not None:
        try:
            mutation = MutationModel(kernels)
            model = Model(n, tuple(labels), mutation, spec)
        except (ReducibleKernelError, ValueError) as exc:
            errors.append(str(exc))

    sample_particles: list[tuple[int, int]] = []
    for k, entry in enumerate(raw.get("sample", [])):
        try:
            assignment = {}
            for site_key, label in entry["type"].items():
                site = int(site_key)
                if not 0 <= site < n:
                    raise ValueError(f"site {site} out of range 0..{n - 1}")
                allele = [str(a) for a in labels[site]].index(str(label))
                assignment[site] = allele
            if not assignment:
                raise ValueError("sample types must observe at least one site")
            count = int(entry.get("count", 1))
            if count < 1:
                raise ValueError(f"count must be >= 1, got {count}")
            sample_particles.append((exact_type(assignment), count))
        except ValueError as exc:
            errors.append(f"sample entry {k}: {exc}")
        except (KeyError, TypeError) as exc:
            errors.append(f"sample entry {k}: malformed ({exc})")

    if errors:
        raise ConfigError(errors)
    return LoadedConfig(model, CountingMeasure(sample_particles), tuple(rhos))


def load_config(path: str | Path) -> LoadedConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read config: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    return parse_config(raw)


def dump_normalized(cfg: LoadedConfig) -> dict:
    """Canonical JSON form of a loaded config; reloads to an identical model."""
    model = cfg.model
    recomb = {
        "partitions": [
            {"blocks": [sorted(_bits(b)) for b in part.blocks], "r": r}
            for part, r in model.recombination.terms
        ]
    }
    sample = []
    for x, c in cfg.sample.items:
        entry = {
            str(site): model.allele_labels[site][mask.bit_length() - 1]
            for site, mask in type_entries(x)
        }
        sample.append({"type": entry, "count": c})
    return {
        "sites": model.n,
        "alleles": [list(a) for a in model.allele_labels],
        "mutation": [
            {"u": k.u, "M": [list(row) for row in k.matrix]} for k in model.mutation.kernels
        ],
        "recombination": recomb,
        "rho": list(cfg.rhos),
        "sample": sample,
    }


def _bits(mask: int) -> list[int]:
    return [i for i in range(MAX_SITES) if mask >> i & 1]
