"""End-to-end workflow: simulate, fit, diagnose, score and compare.

Every command reads a single JSON config (all defaults are filled in and
echoed into outputs) and writes plain files; ``report.json`` is fully
determined by the config, the input data and the seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import sys
import zlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .diagnostics import (
    DEFAULT_TAXONOMY,
    classify_status,
    cross_tab_and_kappa,
    ell_qq_band,
    exceedance_summary,
    exceedance_table,
    qq_points,
    zscore_group_summary,
)
from .distributions import normal_quantile
from .gamlss import FittedGamlssModel, GamlssSpec, ParamFormula, SmoothTerm, fit_gamlss, information_criteria, zscores
from .io import dump_json, load_json, load_model, read_subjects, save_model, write_frame, write_subjects, write_table
from .segmented import FittedSlrModel, fit_slr, slr_information_criteria, slr_zscore
from .synthetic import generate, get_scenario

logger = logging.getLogger(__name__)

RESPONSES = ("ratio", "fev1", "fvc")
MODEL_KINDS = ("gamlss", "slr")


class ConfigError(ValueError):
    pass


def default_gamlss_spec(response: str) -> GamlssSpec:
    if response == "ratio":
        return GamlssSpec(mu=ParamFormula("log", ("1",), SmoothTerm("age", 10.0)))
    return GamlssSpec()


@dataclass
class RunConfig:
    input: str | None = None
    responses: tuple[str, ...] = RESPONSES
    stratify_by_sex: bool = True
    gamlss: dict[str, GamlssSpec] = field(default_factory=dict)
    slr_covariates: tuple[str, ...] = ("height",)
    slr_breakpoint: dict[str, bool] = field(default_factory=lambda: {"ratio": False, "fev1": True, "fvc": True})
    levels: tuple[float, ...] = (0.05, 0.025)
    bin_width: float = 7.5
    bin_start: float | None = None
    ell_coverage: float = 0.95
    ell_reps: int = 10000
    seed: int = 0
    out_dir: str = "out"
    scenario: str = "skew-lung"
    n_simulate: int = 10000
    taxonomy: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_TAXONOMY))

    def __post_init__(self):
        self.responses = tuple(self.responses)
        if not self.responses or not set(self.responses) <= set(RESPONSES):
            raise ConfigError(f"responses must be a non-empty subset of {RESPONSES}")
        self.levels = tuple(float(v) for v in self.levels)
        if not self.levels or not all(0 < v < 0.5 for v in self.levels):
            raise ConfigError("LLN levels must lie in (0, 0.5)")
        if self.bin_width <= 0:
            raise ConfigError("bin_width must be positive")
        if not 0 < self.ell_coverage < 1 or self.ell_reps < 100:
            raise ConfigError("ELL coverage must lie in (0, 1) with at least 100 reps")
        self.slr_covariates = tuple(self.slr_covariates)
        specs = {}
        for r in RESPONSES:
            given = self.gamlss.get(r)
            if given is None:
                specs[r] = default_gamlss_spec(r)
            elif isinstance(given, GamlssSpec):
                specs[r] = given
            else:
                specs[r] = GamlssSpec.from_dict(given)
        self.gamlss = specs
        breaks = {"ratio": False, "fev1": True, "fvc": True}
        breaks.update({k: bool(v) for k, v in self.slr_breakpoint.items()})
        self.slr_breakpoint = breaks
        tax = {int(k): str(v) for k, v in self.taxonomy.items()}
        if set(tax) != set(range(8)):
            raise ConfigError("status taxonomy must name all codes 0-7")
        self.taxonomy = tax

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "input": self.input,
            "responses": list(self.responses),
            "stratify_by_sex": self.stratify_by_sex,
            "gamlss": {r: s.to_dict() for r, s in self.gamlss.items()},
            "slr_covariates": list(self.slr_covariates),
            "slr_breakpoint": dict(self.slr_breakpoint),
            "levels": list(self.levels),
            "bin_width": self.bin_width,
            "bin_start": self.bin_start,
            "ell_coverage": self.ell_coverage,
            "ell_reps": self.ell_reps,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "scenario": self.scenario,
            "n_simulate": self.n_simulate,
            "taxonomy": {str(k): v for k, v in sorted(self.taxonomy.items())},
        }


def _groups(obs: pd.DataFrame, cfg: RunConfig) -> list[tuple[str, np.ndarray]]:
    if not cfg.stratify_by_sex:
        return [("all", np.arange(len(obs)))]
    return [(sex, np.flatnonzero(obs["sex"].to_numpy() == sex)) for sex in ("F", "M") if np.any(obs["sex"] == sex)]


def _subset(obs: pd.DataFrame, idx: np.ndarray) -> dict[str, np.ndarray]:
    return {c: obs[c].to_numpy()[idx] for c in ("id", "age", "height", "weight", "ratio", "fev1", "fvc")}


def _key(response: str, sex: str) -> str:
    return f"{response}_{sex}"


def _level_tag(level: float) -> str:
    return f"{level:g}"


# -- simulate ------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> Path:
    """Write ``data.csv`` and the ground-truth sidecar ``truth.csv`` to the output directory."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario = get_scenario(cfg.scenario)
    data = generate(scenario, cfg.n_simulate, seed=cfg.seed)
    path = out / "data.csv"
    write_subjects(path, data.observations)
    write_frame(out / "truth.csv", data.truth)
    dump_json(out / "truth_meta.json", {"scenario": scenario.name, "n": cfg.n_simulate, "seed": cfg.seed,
                                         "generated": list(scenario.generated), "derived": scenario.derived})
    return path


# -- fit -----------------------------------------------------------------------

def _require_input(cfg: RunConfig) -> pd.DataFrame:
    if not cfg.input:
        raise ConfigError("config has no input path")
    return read_subjects(cfg.input)


def fit_group(data: Mapping, response: str, cfg: RunConfig) -> tuple[FittedGamlssModel, FittedSlrModel]:
    gam = fit_gamlss(data, cfg.gamlss[response], response)
    slr = fit_slr(data, response, cfg.slr_covariates, cfg.slr_breakpoint[response])
    return gam, slr


def cmd_fit(cfg: RunConfig) -> dict:
    """Fit both model families per response and sex; writes ``models/*.json`` and ``fit_summary.json``."""
    obs = _require_input(cfg)
    out = Path(cfg.out_dir)
    mdir = out / "models"
    mdir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for response in cfg.responses:
        for sex, idx in _groups(obs, cfg):
            data = _subset(obs, idx)
            gam, slr = fit_group(data, response, cfg)
            key = _key(response, sex)
            gam_meta = {**information_criteria(gam), "total_edf": gam.total_edf, "converged": gam.converged,
                        "n": gam.n, "sex": sex}
            slr_meta = {**slr_information_criteria(slr, data), "n_params": slr.n_params, "psi": slr.psi,
                        "simple_linear": slr.simple_linear, "n": slr.n, "sex": sex}
            save_model(mdir / f"gamlss_{key}.json", gam, gam_meta)
            save_model(mdir / f"slr_{key}.json", slr, slr_meta)
            summary[key] = {"gamlss": gam_meta, "slr": slr_meta}
            if not gam.converged:
                logger.warning("GAMLSS for %s did not converge; recorded in fit_summary.json", key)
    dump_json(out / "fit_summary.json", {"config": cfg.to_dict(), "models": summary})
    return summary


# -- diagnose ------------------------------------------------------------------

def _model_z(model, data: Mapping) -> np.ndarray:
    if isinstance(model, FittedGamlssModel):
        return zscores(model, data)
    return slr_zscore(data[model.response], model, data)


def _rows_json(rows) -> list[dict]:
    return [vars(r).copy() for r in rows]


def _ell_seed(seed: int, key: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(key.encode())) % (2**63)


def _pick_qq_bin(ages, z_slr, level, cfg):
    """Age bin whose SLR exceedance departs most from ``level`` (bins with n >= 20 only)."""
    rows = exceedance_table(ages, z_slr < normal_quantile(level), level, cfg.bin_width, cfg.bin_start)
    scored = [r for r in rows if not r.low_count] or rows
    return max(scored, key=lambda r: abs(r.proportion - level))


def diagnose_group(data: Mapping, models: Mapping[str, Any], response: str, sex: str, cfg: RunConfig, out: Path | None):
    """All per-(response, sex) diagnostics; optionally writes the figure CSVs to ``out``."""
    key = _key(response, sex)
    ages = np.asarray(data["age"], dtype=float)
    z = {kind: _model_z(models[kind], data) for kind in MODEL_KINDS}
    flags = {}
    exceed = {}
    for level in cfg.levels:
        tag = _level_tag(level)
        exceed[tag] = {}
        for kind in MODEL_KINDS:
            below = z[kind] < normal_quantile(level)
            flags[(kind, level)] = below
            rows = exceedance_table(ages, below, level, cfg.bin_width, cfg.bin_start)
            exceed[tag][kind] = {"rows": _rows_json(rows), "summary": exceedance_summary(rows)}

    first = cfg.levels[0]
    qbin = _pick_qq_bin(ages, z["slr"], first, cfg)
    sel = (ages >= qbin.age_lo) & (ages < qbin.age_hi)
    band = ell_qq_band(int(sel.sum()), cfg.ell_coverage, cfg.ell_reps, _ell_seed(cfg.seed, key))
    qq = {kind: qq_points(z[kind][sel]) for kind in MODEL_KINDS}
    ref = float(normal_quantile(first))
    qq_info = {
        "age_lo": qbin.age_lo,
        "age_hi": qbin.age_hi,
        "n": band.n,
        "coverage": band.coverage,
        "alpha_ell": band.alpha_ell,
        "ell_seed": _ell_seed(cfg.seed, key),
        "reference_z": ref,
    }
    for kind in MODEL_KINDS:
        outside = band.outside(z[kind][sel])
        theo = qq[kind].theoretical
        near = np.abs(theo - ref) <= 0.25
        qq_info[kind] = {
            "inside": not bool(outside.any()),
            "n_outside": int(outside.sum()),
            "n_outside_near_reference": int((outside & near).sum()),
        }

    summaries = {kind: _rows_json(zscore_group_summary(z[kind], ages, cfg.bin_width, cfg.bin_start)) for kind in MODEL_KINDS}
    files = {}
    if out is not None:
        for i, level in enumerate(cfg.levels):
            tag = _level_tag(level)
            name = f"exceedance_{key}.csv" if i == 0 else f"exceedance_{key}_L{tag}.csv"
            g_rows, s_rows = exceed[tag]["gamlss"]["rows"], exceed[tag]["slr"]["rows"]
            write_table(
                out / name,
                ["level", "age_lo", "age_hi", "n", "band_lo", "band_hi", "low_count",
                 "gamlss_k", "gamlss_proportion", "gamlss_inside", "slr_k", "slr_proportion", "slr_inside"],
                [(level, g["age_lo"], g["age_hi"], g["n"], g["band_lo"], g["band_hi"], g["low_count"],
                  g["k"], g["proportion"], g["inside_band"], s["k"], s["proportion"], s["inside_band"])
                 for g, s in zip(g_rows, s_rows)],
            )
            files[f"exceedance_{tag}"] = name
        qname = f"qq_{key}.csv"
        write_table(
            out / qname,
            ["rank", "theoretical_z", "gamlss_z", "slr_z", "band_lo_z", "band_hi_z"],
            zip(band.ranks, qq["gamlss"].theoretical, qq["gamlss"].empirical, qq["slr"].empirical, band.lo_z, band.hi_z),
        )
        files["qq"] = qname
        sname = f"zsummary_{key}.csv"
        write_table(
            out / sname,
            ["model", "age_lo", "age_hi", "n", "mean", "sd", "skewness", "low_count", "degenerate"],
            [(kind, r["age_lo"], r["age_hi"], r["n"], r["mean"], r["sd"], r["skewness"], r["low_count"], r["degenerate"])
             for kind in MODEL_KINDS for r in summaries[kind]],
        )
        files["group_summary"] = sname

    result = {
        "response": response,
        "sex": sex,
        "n": int(ages.size),
        "exceedance": exceed,
        "qq": qq_info,
        "group_summary": summaries,
        "files": files,
    }
    return result, flags


def _versions() -> dict:
    return {
        "lungref": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_models(model_dir: Path, response: str, sex: str):
    key = _key(response, sex)
    return {kind: load_model(model_dir / f"{kind}_{key}.json") for kind in MODEL_KINDS}


def cmd_diagnose(cfg: RunConfig, model_dir: str | Path | None = None, svg: bool = False) -> dict:
    """Run the diagnostic battery on ``cfg.input`` with saved models; writes ``report.json`` and figure CSVs."""
    obs = _require_input(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_dir = Path(model_dir) if model_dir is not None else out / "models"

    groups = []
    models_info = {}
    n = len(obs)
    all_flags = {(kind, level, r): np.zeros(n, dtype=bool) for kind in MODEL_KINDS for level in cfg.levels for r in cfg.responses}
    for response in cfg.responses:
        for sex, idx in _groups(obs, cfg):
            data = _subset(obs, idx)
            models = load_models(model_dir, response, sex)
            res, flags = diagnose_group(data, models, response, sex, cfg, out)
            groups.append(res)
            for (kind, level), f in flags.items():
                all_flags[(kind, level, response)][idx] = f
            gam, slr = models["gamlss"], models["slr"]
            models_info[_key(response, sex)] = {
                "gamlss": {**information_criteria(gam), "total_edf": gam.total_edf, "converged": gam.converged,
                           "nu": float(gam.params["nu"].linear_coef[0]) if gam.params["nu"].smooth is None else None},
                "slr": {**slr_information_criteria(slr, data), "psi": slr.psi, "sd_low": slr.sd_low,
                        "sd_high": slr.sd_high, "simple_linear": slr.simple_linear, "n_params": slr.n_params},
            }

    status = {}
    if set(cfg.responses) == set(RESPONSES):
        ids = obs["id"].to_numpy()
        labels = list(range(8))
        for level in cfg.levels:
            tag = _level_tag(level)
            codes = {
                kind: classify_status(all_flags[(kind, level, "ratio")], all_flags[(kind, level, "fev1")],
                                      all_flags[(kind, level, "fvc")])
                for kind in MODEL_KINDS
            }
            table = cross_tab_and_kappa(codes["gamlss"], codes["slr"], labels=labels)
            sname = f"statuses_L{tag}.csv"
            write_table(out / sname, ["id", "gamlss", "slr"], zip(ids, codes["gamlss"], codes["slr"]))
            cname = f"status_crosstab_L{tag}.csv"
            write_table(out / cname, ["gamlss\\slr"] + [str(c) for c in labels],
                        [[str(c)] + list(row) for c, row in zip(labels, table.cross_tab)])
            status[tag] = {
                "labels": labels,
                "names": [cfg.taxonomy[c] for c in labels],
                "cross_tab": table.cross_tab.tolist(),
                "kappa": table.kappa,
                "p_observed": table.p_observed,
                "p_expected": table.p_expected,
                "counts": {"gamlss": {str(k): v for k, v in table.counts_a.items()},
                           "slr": {str(k): v for k, v in table.counts_b.items()}},
                "percent": {"gamlss": {str(k): v for k, v in table.percent_a.items()},
                            "slr": {str(k): v for k, v in table.percent_b.items()}},
                "statuses_csv": sname,
                "crosstab_csv": cname,
            }

    report = {
        "schema_version": 1,
        "versions": _versions(),
        "config": {k: v for k, v in cfg.to_dict().items() if k != "out_dir"},
        "seeds": {"run": cfg.seed},
        "input": {"path": str(cfg.input), "n_rows": n, "sha256": _sha256(cfg.input)},
        "models": models_info,
        "groups": groups,
        "status": status,
        "notes": [
            "SLR residual SDs are split at the mean-model breakpoint (two-piece constant variance).",
            "Exceedance bands are exact central binomial 95% acceptance regions; bins with n < 20 are flagged low_count and not scored.",
            "QQ plotting positions are (i - 0.5)/n.",
        ],
    }
    dump_json(out / "report.json", report)
    dump_json(out / "run_info.json", {"finished_utc": datetime.now(timezone.utc).isoformat(), "argv": sys.argv})
    if svg:
        from .plots import render_svgs

        render_svgs(out, report)
    return report


# -- zscore --------------------------------------------------------------------

def cmd_zscore(model_path: str | Path, input_path: str | Path, levels: Sequence[float] = (0.05, 0.025)) -> pd.DataFrame:
    """z-score and below-LLN flags for each row of a CSV with ``age_years,height_cm[,weight_kg],value``."""
    from .io import SchemaError

    model = load_model(model_path)
    df = pd.read_csv(input_path)
    missing = {"age_years", "height_cm", "value"} - set(df.columns)
    if missing:
        raise SchemaError(f"{input_path}: missing columns {sorted(missing)}")
    data = {"age": df["age_years"].to_numpy(float), "height": df["height_cm"].to_numpy(float)}
    if "weight_kg" in df:
        data["weight"] = df["weight_kg"].to_numpy(float)
    y = df["value"].to_numpy(float)
    bad = np.flatnonzero(~np.isfinite(y) | (y <= 0))
    if bad.size:
        raise SchemaError(f"{input_path}: non-positive measurements", [f"row {i + 1}" for i in bad])
    data[model.response] = y
    z = _model_z(model, data)
    out = pd.DataFrame({"row": np.arange(1, len(df) + 1), "z": z})
    for level in levels:
        out[f"below_lln_{_level_tag(level)}"] = z < normal_quantile(level)
    return out


# -- compare -------------------------------------------------------------------

def _read_statuses(report_path: Path, name: str) -> pd.DataFrame | None:
    path = report_path.parent / name
    if not path.exists():
        return None
    return pd.read_csv(path, dtype={"id": str})


def cmd_compare(path_a: str | Path, path_b: str | Path) -> dict:
    """Side-by-side summary of two reports; deltas are ``b - a``."""
    path_a, path_b = Path(path_a), Path(path_b)
    a, b = load_json(path_a), load_json(path_b)

    def pass_rates(rep):
        out = {}
        for g in rep["groups"]:
            for tag, per_model in g["exceedance"].items():
                for kind, body in per_model.items():
                    out[(g["response"], g["sex"], tag, kind)] = body["summary"]
        return out

    pa, pb = pass_rates(a), pass_rates(b)
    exceed = []
    for key in sorted(set(pa) | set(pb)):
        ra = pa.get(key, {}).get("pass_rate")
        rb = pb.get(key, {}).get("pass_rate")
        exceed.append({
            "response": key[0], "sex": key[1], "level": key[2], "model": key[3],
            "pass_rate_a": ra, "pass_rate_b": rb,
            "bins_outside_a": pa.get(key, {}).get("bins_outside"),
            "bins_outside_b": pb.get(key, {}).get("bins_outside"),
            "delta": None if ra is None or rb is None else rb - ra,
        })

    status = {}
    for tag in sorted(set(a.get("status", {})) & set(b.get("status", {}))):
        sa, sb = a["status"][tag], b["status"][tag]
        per_model = {}
        for kind in MODEL_KINDS:
            labels = sorted(set(sa["counts"][kind]) | set(sb["counts"][kind]), key=int)
            deltas = {}
            for lab in labels:
                ca, cb = sa["counts"][kind].get(lab, 0), sb["counts"][kind].get(lab, 0)
                qa, qb = sa["percent"][kind].get(lab, 0.0), sb["percent"][kind].get(lab, 0.0)
                deltas[lab] = {"count_a": ca, "count_b": cb, "delta_count": cb - ca,
                               "percent_a": qa, "percent_b": qb, "delta_percent": qb - qa}
            kappa = None
            ta, tb = _read_statuses(path_a, sa["statuses_csv"]), _read_statuses(path_b, sb["statuses_csv"])
            if ta is not None and tb is not None:
                merged = ta.merge(tb, on="id", suffixes=("_a", "_b"))
                if len(merged) == len(ta) == len(tb):
                    kappa = cross_tab_and_kappa(merged[f"{kind}_a"], merged[f"{kind}_b"], labels=list(range(8))).kappa
            per_model[kind] = {"statuses": deltas, "kappa_a_vs_b": kappa}
        per_model["within_report_kappa"] = {"a": sa["kappa"], "b": sb["kappa"]}
        status[tag] = per_model
    return {"report_a": str(path_a), "report_b": str(path_b), "exceedance": exceed, "status": status}


def resolve(cfg: RunConfig, *, out: str | None = None, seed: int | None = None, input: str | None = None) -> RunConfig:
    changes = {}
    if out is not None:
        changes["out_dir"] = out
    if seed is not None:
        changes["seed"] = seed
    if input is not None:
        changes["input"] = input
    return replace(cfg, **changes) if changes else cfg

