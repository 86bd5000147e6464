"""Run configuration and TOML/JSON config-file loading for the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .model import PIECEWISE, Theta, TrialTimeline, WaningModelSpec
from .simulate import ScenarioConfig, preset

WEIGHT_MODES = ("unit", "estimated", "both")


@dataclass
class RunConfig:
    """Everything a CLI invocation needs.

    Exactly one of ``preset``/``data_path`` identifies the input (mc-study and
    simulate use a preset or explicit scenario, estimate uses a data file).
    """

    mode: str
    preset: str | None = None
    scenario: ScenarioConfig | None = None
    data_path: str | None = None
    weights: str = "unit"
    replications: int = 1
    n: int | None = None
    seed: int | None = None
    threads: int = 1
    out_dir: str = "."
    alpha: float = 0.05
    taus: list | None = None
    timeline: TrialTimeline = field(default_factory=TrialTimeline)
    waning: WaningModelSpec = field(default_factory=WaningModelSpec)
    x_ref: list | None = None
    bootstrap: int = 0
    make_figures: bool = True

    def __post_init__(self):
        if self.mode not in ("estimate", "simulate", "mc-study"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.weights not in WEIGHT_MODES:
            raise ValueError(f"weights must be one of {WEIGHT_MODES}")
        if self.mode == "mc-study" and self.replications < 1:
            raise ValueError("mc-study needs replications >= 1")
        sources = sum(x is not None for x in (self.preset, self.data_path, self.scenario))
        if self.mode == "estimate":
            if self.data_path is None and self.preset is None and self.scenario is None:
                raise ValueError("estimate needs a data CSV path (or a preset to simulate from)")
        else:
            if self.data_path is not None:
                raise ValueError(f"{self.mode} takes a preset/scenario, not a data path")
            if sources != 1:
                raise ValueError("exactly one of preset/scenario must be given")

    def resolve_scenario(self) -> ScenarioConfig:
        if self.scenario is not None:
            return self.scenario
        if self.preset is None:
            raise ValueError("no scenario configured")
        kw = {"timeline": self.timeline, "waning": self.waning}
        cfg = preset(self.preset, **kw)
        if self.n is not None:
            cfg = replace(cfg, n=self.n)
        if self.seed is not None:
            cfg = replace(cfg, seed=self.seed)
        return cfg


def _timeline_from(doc: dict) -> TrialTimeline:
    allowed = {"t_accrual", "t_pfizer", "t_pdcv_start", "t_pdcv_end",
               "t_analysis", "lag", "p_assign"}
    bad = set(doc) - allowed
    if bad:
        raise ValueError(f"unknown timeline keys: {sorted(bad)}")
    return TrialTimeline(**doc)


def _waning_from(doc: dict) -> WaningModelSpec:
    kind = doc.get("kind", PIECEWISE)
    knots = tuple(doc.get("knots", (20.0,) if kind == PIECEWISE else ()))
    return WaningModelSpec(kind=kind, knots=knots)


def _scenario_from(doc: dict, timeline: TrialTimeline, waning: WaningModelSpec) -> ScenarioConfig:
    # build the preset with its own default waning first, then apply the
    # custom waning model and any theta override together so dimension
    # validation sees the final combination
    base = preset(doc["preset"], timeline=timeline) if "preset" in doc \
        else ScenarioConfig(timeline=timeline)
    kw = {"waning": waning}
    if "theta0" in doc or "theta1" in doc or waning != base.waning:
        theta0 = float(doc.get("theta0", base.theta_true.theta0))
        theta1 = np.atleast_1d(np.asarray(doc.get("theta1", base.theta_true.theta1), dtype=float))
        kw["theta_true"] = Theta(theta0, theta1)
    for key in ("n", "beta_r1", "gamma_psi", "delta", "frailty_var",
                "lambda_u_multiplier", "lambda_u_lag_multiplier",
                "p_x1", "mu_x2", "sd_x2", "crossover_compare", "seed"):
        if key in doc:
            val = doc[key]
            kw[key] = tuple(val) if isinstance(val, list) else val
    return replace(base, **kw)


def load_config(path, mode: str, **overrides) -> RunConfig:
    """Build a RunConfig from a TOML or JSON file plus CLI overrides."""
    text = open(path, "rb").read()
    if str(path).endswith(".json"):
        doc = json.loads(text.decode())
    else:
        doc = tomllib.loads(text.decode())
    timeline = _timeline_from(doc.get("timeline", {}))
    waning = _waning_from(doc.get("waning", {}))
    run = doc.get("run", {})
    scenario = None
    preset_name = None
    if "scenario" in doc:
        sdoc = doc["scenario"]
        if set(sdoc) == {"preset"}:
            preset_name = sdoc["preset"]
        else:
            scenario = _scenario_from(sdoc, timeline, waning)
    kw = dict(
        mode=mode,
        preset=preset_name,
        scenario=scenario,
        data_path=doc.get("data", {}).get("path"),
        weights=run.get("weights", "unit"),
        replications=int(run.get("replications", 1)),
        n=run.get("n"),
        seed=run.get("seed"),
        threads=int(run.get("threads", 1)),
        out_dir=run.get("out", "."),
        alpha=float(run.get("alpha", 0.05)),
        taus=run.get("taus"),
        timeline=timeline,
        waning=waning,
        x_ref=run.get("x_ref"),
        bootstrap=int(run.get("bootstrap", 0)),
        make_figures=bool(run.get("figures", True)),
    )
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**kw)
