"""Synthetic aligned multi-stain dataset generator.

Each case draws one latent vector per patch position; every stain observes
that latent through its own random orthonormal-column map plus isotropic
noise. Raw cross-stain cosine similarity is therefore uninformative until an
adapter learns the map, which is exactly what the patch-alignment stage is
supposed to recover. Labels and survival targets are simple functions of the
case-mean latent so downstream probes have signal to find.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .data import AlignedCase, CaseSet, PatchBag, StainId, write_bag_file

__all__ = ["SyntheticConfig", "generate_synthetic", "write_caseset", "generate_to_dir"]

# std of the Gaussian noise added to log survival times
_SURVIVAL_LOG_NOISE = 0.25


@dataclass
class SyntheticConfig:
    n_cases: int = 32
    n_patches: int = 64
    dim_latent: int = 8
    dim_embed: int = 32
    noise_sigma: float = 0.1
    seed: int = 0
    censor_rate: float = 0.2
    # per-stain deviation of the IHC maps from their shared random basis.
    # The IHC stains image the same tissue, so their maps share structure;
    # the HE map is drawn independently, which keeps raw HE-to-IHC cosine
    # retrieval at chance for an untrained adapter.
    ihc_spread: float = 0.5
    # scale of the per-stain offset b_m; 0 keeps per-row norms equal to the
    # latent norm under the orthonormal maps
    stain_offset: float = 0.0
    # debug switch: identity maps + zero offsets, so aligned rows coincide
    # across stains when noise_sigma is 0
    identity_maps: bool = False

    def validate(self) -> None:
        if self.n_cases < 1 or self.n_patches < 1:
            raise ValueError("n_cases and n_patches must be positive")
        if self.dim_latent < 1 or self.dim_embed < 1:
            raise ValueError("dims must be positive")
        if self.dim_latent > self.dim_embed:
            raise ValueError("dim_latent must be <= dim_embed")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.ihc_spread < 0.0:
            raise ValueError("ihc_spread must be nonnegative")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ValueError("censor_rate must be in [0, 1)")
        if self.identity_maps and self.dim_latent != self.dim_embed:
            raise ValueError("identity_maps requires dim_latent == dim_embed")

    @classmethod
    def from_json(cls, path: Path) -> "SyntheticConfig":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown synthetic config fields: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


def _orthonormal_columns(gaussian: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(gaussian)
    return q[:, : gaussian.shape[1]]


def _grid_coords(n: int) -> np.ndarray:
    width = int(np.ceil(np.sqrt(n)))
    idx = np.arange(n)
    return np.stack([idx // width, idx % width], axis=1).astype(np.int64)


def generate_synthetic(cfg: SyntheticConfig) -> CaseSet:
    """Build an in-memory aligned CaseSet, fully determined by ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, k = cfg.dim_embed, cfg.dim_latent

    ihc_basis = rng.standard_normal((d, k))
    maps: dict[StainId, np.ndarray] = {}
    offsets: dict[StainId, np.ndarray] = {}
    for stain in StainId:
        gaussian = rng.standard_normal((d, k))
        if stain is not StainId.HE:
            gaussian = ihc_basis + cfg.ihc_spread * gaussian
        b = cfg.stain_offset * rng.standard_normal(d)
        if cfg.identity_maps:
            maps[stain] = np.eye(d)
            offsets[stain] = np.zeros(d)
        else:
            maps[stain] = _orthonormal_columns(gaussian)
            offsets[stain] = b
    w_surv = rng.standard_normal(k)

    coords = _grid_coords(cfg.n_patches)
    cases: list[AlignedCase] = []
    labels: dict[str, int] = {}
    survival: dict[str, tuple[float, bool]] = {}
    for i in range(cfg.n_cases):
        case_id = f"case_{i:04d}"
        latents = rng.standard_normal((cfg.n_patches, k))
        bags: dict[StainId, PatchBag] = {}
        for stain in StainId:
            rows = latents @ maps[stain].T + offsets[stain]
            if cfg.noise_sigma > 0.0:
                rows = rows + cfg.noise_sigma * rng.standard_normal((cfg.n_patches, d))
            bags[stain] = PatchBag(
                slide_id=f"{case_id}_{stain.name}",
                stain=stain,
                coords=coords,
                embeddings=rows.astype(np.float32),
            )
        cases.append(AlignedCase(case_id=case_id, bags=bags))

        mean_latent = latents.mean(axis=0)
        labels[case_id] = int(mean_latent[0] > 0.0)
        log_noise = _SURVIVAL_LOG_NOISE * rng.standard_normal()
        true_time = float(np.exp(-float(w_surv @ mean_latent) + log_noise))
        censor_draw = rng.random()
        censor_frac = rng.uniform(0.1, 0.9)
        if censor_draw < cfg.censor_rate:
            survival[case_id] = (true_time * censor_frac, False)
        else:
            survival[case_id] = (true_time, True)

    case_set = CaseSet(cases=cases, labels=labels, survival=survival)
    case_set.validate()
    return case_set.freeze()


def write_caseset(case_set: CaseSet, out_dir: Path) -> Path:
    """Write bags and a manifest under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in case_set.cases:
        bag_map = {}
        for stain, bag in case.bags.items():
            rel = f"{case.case_id}/{stain.name}.cseb"
            write_bag_file(bag, out_dir / rel)
            bag_map[stain.name] = rel
        entry: dict = {"case_id": case.case_id, "bags": bag_map}
        if case_set.labels is not None:
            entry["label"] = case_set.labels[case.case_id]
        if case_set.survival is not None:
            t, e = case_set.survival[case.case_id]
            entry["survival"] = {"time": t, "event": e}
        entries.append(entry)
    manifest = {"require_ihc": case_set.require_ihc, "cases": entries}
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path


def generate_to_dir(cfg: SyntheticConfig, out_dir: Path) -> Path:
    """Generate and persist a dataset; convenience for the CLI."""
    manifest = write_caseset(generate_synthetic(cfg), out_dir)
    with open(Path(out_dir) / "synthetic_config.json", "w", encoding="utf-8") as f:
        json.dump(asdict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest
