"""
Runtime verification of the structural properties of the flow construction
and the integrators, run as a pipeline of independent check steps.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from flowmorph.config import DEFAULT_CONFIG
from flowmorph.core.analysis import intersection_study
from flowmorph.core.losses import chamfer_var
from flowmorph.flow.advect import deform, deform_trajectory, integrate_with_grad
from flowmorph.flow.field import (
    MIRROR,
    FLOW_MODES,
    SIGN_MODES,
    SYMMETRIES,
    FlowModel,
    FlowModelError,
    PairContext,
    eval_flow,
    finite_difference_divergence,
    flow_divergence,
    symmetrize,
)
from flowmorph.flow.odeint import OdeConfig, integrate
from flowmorph.geometry.mesh import signed_volume
from flowmorph.geometry.primitives import icosphere
from flowmorph.numerics.tape import Var
from flowmorph.utils import child_seed, make_rng

logger = logging.getLogger(__name__)

DEFAULT_SIZES = {
    "points": 1000,
    "width": 16,
    "latent_dim": 8,
    "negation_points": 10000,
    "round_trip_points": 100,
    "gradient_points": 12,
    "gradient_width": 8,
    "sphere_level": 3,
}

ROUND_TRIP_STEPS = (5, 10, 20, 40)


@dataclass
class PipelineStep:
    name: str
    function: Callable
    enabled: bool = True


@dataclass
class PropertyResult:
    name: str
    passed: bool
    value: Any
    tolerance: Any = None
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "value": self.value,
            "tolerance": self.tolerance,
            "details": self.details,
        }


@dataclass
class VerifyReport:
    properties: List[PropertyResult]
    seed: int
    sizes: Dict[str, int]
    config: Dict[str, Any] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.properties)

    @property
    def failures(self) -> List[str]:
        return [p.name for p in self.properties if not p.passed]

    def get(self, name: str) -> Optional[PropertyResult]:
        for prop in self.properties:
            if prop.name == name:
                return prop
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "seed": self.seed,
            "sizes": self.sizes,
            "properties": [p.to_dict() for p in self.properties],
            "timing": self.timing,
            "config": self.config,
        }


def _random_model(rng: np.random.Generator, mode: str = "direct", symmetry: str = "off", sign: str = "hub",
                  width: int = 16, latent_dim: int = 8, activation: str = "elu") -> FlowModel:
    return FlowModel.create(latent_dim, width, mode, symmetry, sign, activation, seed=child_seed(rng))


def _random_context(rng: np.random.Generator, model: FlowModel, scale: float = 0.5) -> PairContext:
    z = rng.normal(0.0, scale, size=model.latent_dim)
    if model.sign == "hub":
        return PairContext(z, np.zeros(model.latent_dim))
    return PairContext(z, rng.normal(0.0, scale, size=model.latent_dim))


def _points(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(-0.5, 0.5, size=(n, 3))


def _finite(value: float) -> Any:
    return value if math.isfinite(value) else str(value)


class FlowPipeline:
    """Ordered set of verification steps sharing one seeded context."""

    def __init__(self, config=None, seed: Optional[int] = None, sizes: Optional[Dict[str, int]] = None):
        self.config = config if config else DEFAULT_CONFIG
        self.seed = self.config.seed("verify", seed)
        self.sizes = dict(DEFAULT_SIZES)
        for key in ("points", "width", "latent_dim"):
            configured = self.config.get(f"verify.{key}")
            if configured is not None:
                self.sizes[key] = int(configured)
        if sizes:
            self.sizes.update({k: int(v) for k, v in sizes.items() if v is not None})
        self.steps: List[PipelineStep] = []
        self.results: Optional[VerifyReport] = None
        self.timing: Dict[str, float] = {}
        self._setup_default_steps()

    def _setup_default_steps(self):
        self.steps = [
            PipelineStep("identity_flow", self._identity_step),
            PipelineStep("negation_symmetry", self._negation_step),
            PipelineStep("divergence", self._divergence_step),
            PipelineStep("symmetric_divergence", self._symmetric_divergence_step),
            PipelineStep("mirror_symmetry", self._mirror_step),
            PipelineStep("round_trip", self._round_trip_step),
            PipelineStep("rk4_convergence", self._rk4_convergence_step),
            PipelineStep("volume_drift", self._volume_step),
            PipelineStep("gradient_check", self._gradient_step),
            PipelineStep("relu_curl_rejected", self._relu_control_step),
            PipelineStep("intersection_study", self._intersection_step, enabled=False),
        ]

    def enable_step(self, name: str):
        for step in self.steps:
            if step.name == name:
                step.enabled = True
                break

    def process(self) -> VerifyReport:
        """
        Run every enabled step. A step that raises is recorded as a failed
        property rather than aborting the run.
        """
        context = {"rng": make_rng(self.seed), "results": []}
        logger.info(f"Starting verification with seed {self.seed}")

        for step in self.steps:
            if not step.enabled:
                logger.debug(f"Skipping disabled step: {step.name}")
                continue
            start_time = time.time()
            try:
                context = step.function(context)
            except Exception as e:
                logger.error(f"Error in step {step.name}: {e}")
                context["results"].append(PropertyResult(step.name, False, None, None, {"error": str(e)}))
            self.timing[step.name] = time.time() - start_time

        for result in context["results"]:
            level = logging.INFO if result.passed else logging.WARNING
            logger.log(level, f"{result.name}: {'pass' if result.passed else 'FAIL'} "
                              f"(value={result.value}, tolerance={result.tolerance})")

        self.results = VerifyReport(context["results"], self.seed, dict(self.sizes),
                                    self.config.to_dict(), self.timing.copy())
        return self.results

    def _model(self, context, **flags) -> FlowModel:
        flags.setdefault("width", self.sizes["width"])
        flags.setdefault("latent_dim", self.sizes["latent_dim"])
        return _random_model(context["rng"], **flags)

    def _identity_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        rng = context["rng"]
        model = self._model(context, mode="divfree")
        z = rng.normal(0.0, 0.5, size=model.latent_dim)
        ctx = PairContext(z, z.copy())
        x = _points(rng, self.sizes["points"])
        velocity = float(np.max(np.abs(eval_flow(model, ctx, x, float(rng.uniform())))))
        moved = deform(model, ctx, x, OdeConfig.dopri5())
        exact = bool(np.array_equal(moved, x))
        context["results"].append(PropertyResult("identity_flow", velocity == 0.0 and exact, velocity, 0.0,
                                                 {"bitwise_identity": exact}))
        return context

    def _negation_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        rng = context["rng"]
        n = self.sizes["negation_points"]
        worst, by_combo = 0.0, {}
        for mode in FLOW_MODES:
            for symmetry in SYMMETRIES:
                for sign in SIGN_MODES:
                    model = self._model(context, mode=mode, symmetry=symmetry, sign=sign)
                    ctx = _random_context(rng, model)
                    x = _points(rng, n)
                    t = float(rng.uniform())
                    forward = eval_flow(model, ctx, x, t)
                    backward = eval_flow(model, ctx.reversed(), x, 1.0 - t)
                    scale = max(1.0, float(np.max(np.abs(forward))))
                    residual = float(np.max(np.abs(forward + backward))) / scale
                    by_combo[f"{mode}/{symmetry}/{sign}"] = residual
                    worst = max(worst, residual)
        context["results"].append(PropertyResult("negation_symmetry", worst < 1e-12, worst, 1e-12, by_combo))
        return context

    def _divergence_samples(self, context, model: FlowModel, contexts: int = 10):
        rng = context["rng"]
        per = max(1, self.sizes["points"] // contexts)
        for _ in range(contexts):
            yield _random_context(rng, model), _points(rng, per), float(rng.uniform())

    def _divergence_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        model = self._model(context, mode="divfree")
        exact, fd = 0.0, 0.0
        for ctx, x, t in self._divergence_samples(context, model):
            exact = max(exact, float(np.max(np.abs(flow_divergence(model, ctx, x, t)))))
            fd = max(fd, float(np.max(np.abs(finite_difference_divergence(model, ctx, x, t)))))
        context["results"].append(PropertyResult("divergence_exact", exact < 1e-9, exact, 1e-9))
        context["results"].append(PropertyResult("divergence_finite_difference", fd < 1e-5, fd, 1e-5))

        direct = self._model(context, mode="direct")
        ctx, x, t = next(self._divergence_samples(context, direct))
        reference = float(np.max(np.abs(flow_divergence(direct, ctx, x, t))))
        context["results"][-1].details["direct_mode_divergence"] = reference
        return context

    def _symmetric_divergence_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        model = self._model(context, mode="divfree", symmetry="yz")
        worst = 0.0
        for ctx, x, t in self._divergence_samples(context, model):
            worst = max(worst, float(np.max(np.abs(flow_divergence(model, ctx, x, t)))))
        passed = worst < 1e-9
        if not passed:
            logger.warning("Mirror-symmetrized curl field is not divergence-free; avoid combining the two modes")
        context["results"].append(PropertyResult("symmetric_divergence", passed, worst, 1e-9))
        return context

    def _mirror_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        rng = context["rng"]
        n = self.sizes["negation_points"]
        worst_value, worst_plane = 0.0, 0.0
        for mode in FLOW_MODES:
            model = self._model(context, mode=mode, symmetry="yz")
            z = rng.normal(0.0, 0.5, size=model.latent_dim)
            x = _points(rng, n)
            h = symmetrize(model, x, z)
            h_mirrored = symmetrize(model, x * MIRROR, z)
            worst_value = max(worst_value, float(np.max(np.abs(h_mirrored - h * MIRROR))))
            plane = x.copy()
            plane[:, 0] = 0.0
            worst_plane = max(worst_plane, float(np.max(np.abs(symmetrize(model, plane, z)[:, 0]))))
        worst = max(worst_value, worst_plane)
        context["results"].append(PropertyResult("mirror_symmetry", worst < 1e-12, worst, 1e-12,
                                                 {"mirror_relation": worst_value, "plane_normal_velocity": worst_plane}))
        return context

    def _round_trip_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        rng = context["rng"]
        model = self._model(context, mode="direct")
        ctx = _random_context(rng, model)
        x = _points(rng, self.sizes["round_trip_points"])

        tight = OdeConfig.dopri5(1e-8, 1e-8)
        back = deform(model, ctx.reversed(), deform(model, ctx, x, tight), tight)
        error = float(np.max(np.abs(back - x)))
        context["results"].append(PropertyResult("round_trip_dopri5", error < 1e-6, error, 1e-6))

        table = {}
        for steps in ROUND_TRIP_STEPS:
            cfg = OdeConfig.rk4(steps)
            back = deform(model, ctx.reversed(), deform(model, ctx, x, cfg), cfg)
            table[str(steps)] = float(np.max(np.abs(back - x)))
        errors = list(table.values())
        monotone = all(b < a for a, b in zip(errors, errors[1:]))
        context["results"].append(PropertyResult("round_trip_rk4_monotone", monotone, table, "decreasing"))
        return context

    def _rk4_convergence_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        def decay(x, t):
            return -x

        x0 = np.ones((1, 3))
        exact = math.exp(-1.0)
        errors = [abs(float(integrate(decay, x0, (0.0, 1.0), OdeConfig.rk4(s)).final[0, 0]) - exact)
                  for s in ROUND_TRIP_STEPS]
        orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
        order = float(np.mean(orders))
        ten = abs(float(integrate(decay, x0, (0.0, 1.0), OdeConfig.rk4(10)).final[0, 0]) - exact)
        context["results"].append(PropertyResult("rk4_order", 3.5 <= order <= 4.5, order, [3.5, 4.5],
                                                 {"errors": errors, "orders": orders}))
        context["results"].append(PropertyResult("rk4_decay_10_steps", ten < 1e-6, ten, 1e-6))
        return context

    def _volume_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        rng = context["rng"]
        mesh = icosphere(self.sizes["sphere_level"], 0.35)
        base = signed_volume(mesh)
        record = np.linspace(0.0, 1.0, 20)[1:-1]
        drifts = {}
        for mode in FLOW_MODES:
            model = self._model(context, mode=mode)
            ctx = PairContext(rng.normal(0.0, 0.1, size=model.latent_dim), np.zeros(model.latent_dim))
            traj = deform_trajectory(model, ctx, mesh.vertices, OdeConfig.dopri5(), record_times=record)
            drifts[mode] = max(abs(signed_volume(mesh.with_vertices(s)) - base) / abs(base) for s in traj.states)
        drift = float(drifts["divfree"])
        context["results"].append(PropertyResult("volume_drift", drift < 5e-3, drift, 5e-3,
                                                 {"direct_mode_drift": float(drifts["direct"])}))
        return context

    def _gradient_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        rng = context["rng"]
        model = self._model(context, mode="divfree", symmetry="yz", width=self.sizes["gradient_width"])
        ctx = _random_context(rng, model)
        n = self.sizes["gradient_points"]
        points = _points(rng, n) * 0.8
        target = points + rng.normal(0.0, 0.05, size=points.shape)
        cfg = OdeConfig.rk4(5)

        def loss_fn(out):
            return chamfer_var(out, target)

        _, grads = integrate_with_grad(model, ctx, points, cfg, loss_fn)

        def loss_at(m: FlowModel, source) -> float:
            moved = deform(m, PairContext(source, ctx.target_value), points, cfg)
            return float(chamfer_var(Var(moved), target).value)

        eps = 1e-6
        worst, checked = 0.0, 0
        tensors = dict(model.named_tensors())
        sampled_entries = [(name, tuple(int(rng.integers(0, d)) for d in tensors[name].shape)) for name in tensors]
        sampled_entries += [("latent.source", (int(rng.integers(0, model.latent_dim)),)) for _ in range(2)]

        for name, index in sampled_entries:
            if name == "latent.source":
                plus, minus = ctx.source_value.copy(), ctx.source_value.copy()
                plus[index] += eps
                minus[index] -= eps
                numeric = (loss_at(model, plus) - loss_at(model, minus)) / (2 * eps)
            else:
                plus, minus = tensors[name].copy(), tensors[name].copy()
                plus[index] += eps
                minus[index] -= eps
                numeric = (loss_at(model.with_tensors({name: plus}), ctx.source_value)
                           - loss_at(model.with_tensors({name: minus}), ctx.source_value)) / (2 * eps)
            analytic = float(grads[name][index])
            error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
            worst = max(worst, error)
            checked += 1

        context["results"].append(PropertyResult("gradient_check", worst < 1e-4, _finite(worst), 1e-4,
                                                 {"entries_checked": checked}))
        return context

    def _relu_control_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        try:
            self._model(context, mode="divfree", activation="relu")
        except FlowModelError as e:
            context["results"].append(PropertyResult("relu_curl_rejected", True, "rejected", "rejected",
                                                     {"message": str(e)}))
            return context
        context["results"].append(PropertyResult("relu_curl_rejected", False, "accepted", "rejected"))
        return context

    def _intersection_step(self, context: Dict[str, Any]) -> Dict[str, Any]:
        rng = context["rng"]
        model = self._model(context, mode="direct")
        ctx = _random_context(rng, model)
        rows = intersection_study(model, ctx, icosphere(2, 0.35))
        context["results"].append(PropertyResult("intersection_study", True, [r.to_dict() for r in rows],
                                                 "reported"))
        return context


def run_verify(seed: Optional[int] = None, sizes: Optional[Dict[str, int]] = None, config=None,
               study: bool = False) -> VerifyReport:
    """Run the verification suite; ``study`` adds the report-only intersection study."""
    pipeline = FlowPipeline(config, seed, sizes)
    if study:
        pipeline.enable_step("intersection_study")
    return pipeline.process()
