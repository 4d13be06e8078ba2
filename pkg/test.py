#!/usr/bin/env python3
"""
Quick test runner for FlowMorph
Run this to make sure everything is working; add --slow for the
desk-scale training scenarios.
"""

import csv
import functools
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

# Add flowmorph to path if not installed
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from flowmorph import morph_meshes, quick_verify
from flowmorph.config import Config, SEED_ENV_VAR
from flowmorph.core.analysis import (
    deformation_grid,
    intersection_study,
    latent_projection,
    run_metrics,
    transfer,
)
from flowmorph.core.canonical import Correspondence, canonicalize, correspond, naive_correspond, sms
from flowmorph.core.checkpoint import DatasetManifest, FlowCheckpoint, LatentTable
from flowmorph.core.embedder import EmbedConfig, embed, eval_reconstruction, reconstruct, retrieve_topk
from flowmorph.core.engine import FlowEngine
from flowmorph.core.interp import (
    InterpConfig,
    fit_pair,
    interpolate,
    linear_interpolate,
    mean_relative_edge_change,
    render_animation,
)
from flowmorph.core.losses import (
    chamfer_var,
    edge_regularizer,
    hub_spoke_loss,
    pairwise_loss,
    pairwise_terms,
    vertex_l2_loss,
)
from flowmorph.core.trainer import TrainConfig, Trainer, sample_pairs
from flowmorph.flow.advect import deform, deform_through_hub, deform_trajectory, integrate_with_grad
from flowmorph.flow.field import (
    MIRROR,
    FlowModel,
    FlowModelError,
    PairContext,
    curl_potential,
    eval_flow,
    finite_difference_divergence,
    flow_divergence,
    sign_value,
    symmetrize,
)
from flowmorph.flow.odeint import OdeConfig, integrate, rk4_step
from flowmorph.geometry.intersect import count_triangle_intersections, count_triangle_intersections_bruteforce
from flowmorph.geometry.mesh import Mesh, PointCloud, edge_lengths, normalize_to_unit, sample_surface, signed_volume
from flowmorph.geometry.meshio import MeshParseError, load_mesh, round_significant, save_mesh
from flowmorph.geometry.primitives import (
    bending_limb,
    icosphere,
    labeled_box,
    labeled_box_family,
    overfit_pair,
    stretched_box,
    unit_cube,
)
from flowmorph.geometry.spatial import SpatialIndex, brute_force_nearest, chamfer
from flowmorph.numerics import tape as T
from flowmorph.numerics.mlp import build_backbone, mlp_forward, spatial_jacobian
from flowmorph.numerics.optim import AdamState, adam_step
from flowmorph.numerics.tape import GradTape, Var, backprop_scalar
from flowmorph.outputs import DataExporter, ReportFormatter
from flowmorph.processors import ShapePreprocessor
from flowmorph.utils import OperationTimer


def _points(seed, n, scale=0.4):
    return np.random.default_rng(seed).uniform(-scale, scale, size=(n, 3))


@functools.lru_cache(maxsize=None)
def _toy_space():
    """Two-shape space trained for a handful of steps; shared by the fast tests."""
    shapes = list(overfit_pair(subdivisions=1))
    cfg = TrainConfig(steps=3, batch_size=2, samples_per_shape=48, latent_dim=2, width=4, seed=3)
    checkpoint = Trainer(cfg, threads=2).fit(shapes)
    return checkpoint, shapes


def _fast_embed_config(**overrides):
    settings = dict(iterations=2, fine_tune_iterations=1, k=2, shapes_per_step=2, samples=48,
                    eval_samples=128, eval_ode=OdeConfig.rk4(4))
    settings.update(overrides)
    return EmbedConfig(**settings)


def test_configuration():
    """Test dot access, YAML loading and flag precedence"""
    print("=== Testing Configuration ===\n")

    config = Config()
    assert config.get("flow.mode") == "direct"
    assert config.get("training.steps") == 500
    assert config.get("missing.key", 7) == 7

    config.set("training.steps", 12)
    assert config.get("training.steps") == 12

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "train.yaml"
        path.write_text("steps: 40\nmode: divfree\nsymmetry: off\nembedding:\n  k: 3\n", encoding="utf-8")
        loaded = Config(str(path))
        print(f"Loaded flat config: steps={loaded.get('training.steps')}, mode={loaded.get('flow.mode')}")
        assert loaded.get("training.steps") == 40
        assert loaded.get("flow.mode") == "divfree"
        assert loaded.get("flow.symmetry") == "off"
        assert loaded.get("embedding.k") == 3
        assert loaded.get("embedding.iterations") == 30

        # flag > file > default; unset flags are skipped
        loaded.override({"training.steps": 5, "training.seed": None})
        assert loaded.get("training.steps") == 5
        assert loaded.get("training.seed") == 0

        try:
            Config(str(Path(tmp) / "missing.yaml"))
            raise AssertionError("missing config file accepted")
        except FileNotFoundError:
            pass

    seeded = Config()
    seeded.set("training.seed", None)
    previous = os.environ.get(SEED_ENV_VAR)
    os.environ[SEED_ENV_VAR] = "17"
    try:
        assert seeded.seed("training") == 17
        assert seeded.seed("training", 4) == 4
    finally:
        if previous is None:
            del os.environ[SEED_ENV_VAR]
        else:
            os.environ[SEED_ENV_VAR] = previous

    print("✅ Configuration test completed!")
    return True


def test_tape_and_optimizer():
    """Test reverse-mode gradients and the Adam step"""
    print("=== Testing Gradient Tape and Optimizer ===\n")

    x0 = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]])
    with GradTape() as tape:
        x = tape.watch(x0, "x")
        w = tape.watch(np.array([0.5, -1.0, 2.0]), "w")
        unused = tape.watch(np.ones(2), "unused")
        out = T.vsum(T.square(x) * w)
    grads = backprop_scalar(tape, out)
    assert np.allclose(grads["x"], 2.0 * x0 * np.array([0.5, -1.0, 2.0]))
    assert np.allclose(grads["w"], np.sum(x0 ** 2, axis=0))
    assert np.array_equal(grads["unused"], np.zeros(2))

    try:
        backprop_scalar(tape, out)
        raise AssertionError("consumed tape reused")
    except RuntimeError:
        pass

    # same code without a tape is plain arithmetic
    assert float(T.vsum(Var(x0) * 2.0).value) == float(np.sum(x0) * 2.0)

    state = AdamState(0.1)
    values = {"a": np.array([1.0, 2.0]), "b": np.array([5.0])}
    state, updated = adam_step(state, values, {"a": np.array([1.0, -1.0])})
    # first Adam step moves each entry by the learning rate against the gradient sign
    assert np.allclose(updated["a"], [0.9, 2.1])
    assert np.array_equal(updated["b"], values["b"])
    assert state.key_steps == {"a": 1}

    try:
        adam_step(state, values, {"c": np.zeros(1)})
        raise AssertionError("gradient for unknown tensor accepted")
    except ValueError:
        pass

    print("✅ Gradient tape and optimizer test completed!")
    return True


def test_linear_flow_gradient():
    """Test RK4 gradients against the closed form of dx/dt = a x"""
    print("=== Testing Closed-Form RK4 Gradient ===\n")

    a0 = 0.7
    x0 = np.array([[1.0, 2.0, -0.5]])
    with GradTape() as tape:
        a = tape.watch(np.array(a0), "a")
        x = tape.watch(x0, "x")
        out = rk4_step(lambda p, t: p * a, x, 0.0, 1.0)
        total = T.vsum(out)
    grads = backprop_scalar(tape, total)

    amplification = 1.0 + a0 + a0 ** 2 / 2.0 + a0 ** 3 / 6.0 + a0 ** 4 / 24.0
    derivative = 1.0 + a0 + a0 ** 2 / 2.0 + a0 ** 3 / 6.0
    print(f"d/da: taped {float(grads['a']):.12f}, closed form {np.sum(x0) * derivative:.12f}")
    assert np.allclose(out.value, x0 * amplification, rtol=1e-14)
    assert abs(float(grads["a"]) - np.sum(x0) * derivative) < 1e-12
    assert np.allclose(grads["x"], amplification)

    print("✅ Closed-form gradient test completed!")
    return True


def test_geometry():
    """Test mesh measures, sampling, nearest neighbours and intersections"""
    print("=== Testing Geometry ===\n")

    cube = unit_cube()
    assert abs(signed_volume(cube) - 1.0) < 1e-12
    assert abs(signed_volume(cube.flipped()) + 1.0) < 1e-12
    edges, lengths = edge_lengths(cube)
    assert edges.shape == (18, 2)
    assert np.all(lengths > 0)

    normalized, scale, offset = normalize_to_unit(stretched_box(2.0))
    assert abs(np.max(np.ptp(normalized.vertices, axis=0)) - 1.0) < 1e-12
    assert np.allclose(normalized.vertices * scale + offset, stretched_box(2.0).vertices)

    sphere = icosphere(2, 0.5)
    a = sample_surface(sphere, 200, seed=5)
    b = sample_surface(sphere, 200, seed=5)
    assert np.array_equal(a.points, b.points)
    assert np.allclose(np.linalg.norm(a.points, axis=1), 0.5, atol=0.05)

    queries = _points(1, 300)
    index = SpatialIndex(a)
    idx, sq = index.query(queries)
    ref_idx, ref_sq = brute_force_nearest(a.points, queries)
    assert np.array_equal(idx, ref_idx)
    assert np.allclose(sq, ref_sq)

    assert chamfer(a, a) == 0.0
    shifted = a.points + np.array([0.01, 0.0, 0.0])
    assert chamfer(a, shifted, "l1_eval") <= 0.01 + 1e-12
    try:
        chamfer(a, np.zeros((0, 3)))
        raise AssertionError("empty Chamfer accepted")
    except ValueError:
        pass

    assert count_triangle_intersections(sphere) == 0
    crossing = Mesh(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.2, 0.2, -0.5], [0.2, 0.2, 0.5], [0.9, 0.9, 0.0]],
        [[0, 1, 2], [3, 4, 5]],
    )
    assert count_triangle_intersections(crossing) == 1
    assert count_triangle_intersections_bruteforce(crossing) == 1

    print("✅ Geometry test completed!")
    return True


def test_mesh_io():
    """Test OBJ/PLY round trips, label sidecars and malformed files"""
    print("=== Testing Mesh IO ===\n")

    mesh = labeled_box(0.8, subdivisions=1)
    with tempfile.TemporaryDirectory() as tmp:
        for name, binary in (("box.obj", False), ("box.ply", False), ("binary.ply", True)):
            path = save_mesh(mesh, Path(tmp) / name, binary=binary)
            loaded = load_mesh(path)
            assert loaded.num_vertices == mesh.num_vertices
            assert np.array_equal(loaded.faces, mesh.faces)
            assert np.allclose(loaded.vertices, mesh.vertices, atol=1e-8)
            assert np.array_equal(loaded.labels, mesh.labels)
            print(f"  - {name}: {loaded.num_vertices} vertices, labels kept")

        rounded = round_significant(np.array([0.123456789123, -98765.4321987, 0.0]))
        assert np.allclose(rounded, [0.123456789, -98765.4322, 0.0], rtol=1e-15, atol=0.0)

        bad = Path(tmp) / "bad.obj"
        bad.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n", encoding="utf-8")
        try:
            load_mesh(bad)
            raise AssertionError("out-of-range face accepted")
        except MeshParseError:
            pass

        try:
            load_mesh(Path(tmp) / "missing.obj")
            raise AssertionError("missing mesh accepted")
        except FileNotFoundError:
            pass

    print("✅ Mesh IO test completed!")
    return True


def test_preprocessor():
    """Test normalization and observation corruption"""
    print("=== Testing Shape Preprocessor ===\n")

    preprocessor = ShapePreprocessor()
    result = preprocessor.process(stretched_box(1.8))
    print(f"Changes: {result['changes_made']}, scale {result['scale']:.3f}")
    assert "normalized" in result["changes_made"]
    assert abs(np.max(np.ptp(result["mesh"].vertices, axis=0)) - 1.0) < 1e-12

    observation = preprocessor.corrupt_observation(icosphere(2, 0.4), 300, 0.05, seed=2)
    again = preprocessor.corrupt_observation(icosphere(2, 0.4), 300, 0.05, seed=2)
    assert len(observation) == 300
    assert np.array_equal(observation.points, again.points)
    assert not np.allclose(np.linalg.norm(observation.points, axis=1), 0.4, atol=1e-6)

    print("✅ Shape preprocessor test completed!")
    return True


def test_network_derivatives():
    """Test the exact spatial Jacobian, the curl of the potential and the direct pair loss"""
    print("=== Testing Network Derivatives ===\n")

    backbone = build_backbone(2, 3, "tanh", np.random.default_rng(11))
    x = np.array([0.15, -0.3, 0.2])
    z = np.array([0.4, -0.1])
    jac = spatial_jacobian(backbone, x, z)
    assert jac.shape == (3, 3)

    h = 1e-6
    numeric = np.stack([
        (mlp_forward(backbone, np.concatenate([x + h * e, z])) - mlp_forward(backbone, np.concatenate([x - h * e, z])))
        / (2.0 * h)
        for e in np.eye(3)
    ], axis=1)
    print(f"Jacobian max deviation from central differences: {np.max(np.abs(jac - numeric)):.2e}")
    assert np.allclose(jac, numeric, atol=1e-6)

    curl_model = FlowModel.create(latent_dim=2, width=3, mode="divfree", seed=12)
    j = spatial_jacobian(curl_model.backbone, x, z)
    expected = np.array([j[2, 1] - j[1, 2], j[0, 2] - j[2, 0], j[1, 0] - j[0, 1]])
    assert np.allclose(curl_potential(curl_model, x, z), expected, atol=1e-12)
    try:
        curl_potential(FlowModel.create(latent_dim=2, width=3, seed=12), x, z)
        raise AssertionError("curl of a direct model accepted")
    except FlowModelError:
        pass

    odd = FlowModel.create(latent_dim=2, width=4, sign="oddmlp", seed=13)
    table = np.array([[0.2, 0.1], [-0.1, 0.3]])
    samples = [_points(14, 20), _points(15, 20)]
    assert pairwise_loss(odd, table, 0, 0, [samples[0], samples[0]], OdeConfig.rk4(3)) == 0.0
    loss = pairwise_loss(odd, table, 0, 1, samples, OdeConfig.rk4(3))
    assert np.isfinite(loss) and loss > 0

    print("✅ Network derivatives test completed!")
    return True


def test_flow_field():
    """Test identity, negation, hub sign, divergence and mirror properties"""
    print("=== Testing Flow Field ===\n")

    x = _points(0, 50)
    model = FlowModel.create(latent_dim=3, width=4, seed=1)
    z = np.array([0.3, -0.2, 0.1])
    hub = np.zeros(3)

    assert np.array_equal(eval_flow(model, PairContext(z, z), x, 0.4), np.zeros_like(x))
    moved = deform(model, PairContext(z, z), x, OdeConfig.dopri5())
    assert np.array_equal(moved, x)

    forward = eval_flow(model, PairContext(z, hub), x, 0.3)
    backward = eval_flow(model, PairContext(hub, z), x, 0.7)
    assert np.max(np.abs(forward + backward)) < 1e-12
    assert sign_value(model, PairContext(z, hub)) == 1.0
    assert sign_value(model, PairContext(hub, z)) == -1.0

    try:
        eval_flow(model, PairContext(z, -z), x, 0.5)
        raise AssertionError("hub sign used between two non-hub codes")
    except FlowModelError:
        pass
    try:
        eval_flow(model, PairContext(z, hub), x, 1.5)
        raise AssertionError("time outside [0, 1] accepted")
    except ValueError:
        pass

    odd = FlowModel.create(latent_dim=3, width=4, sign="oddmlp", seed=2)
    w = np.array([-0.1, 0.4, 0.2])
    assert abs(sign_value(odd, PairContext(z, w)) + sign_value(odd, PairContext(w, z))) < 1e-15
    assert np.max(np.abs(eval_flow(odd, PairContext(z, w), x, 0.25)
                         + eval_flow(odd, PairContext(w, z), x, 0.75))) < 1e-12

    curl = FlowModel.create(latent_dim=3, width=4, mode="divfree", seed=3)
    ctx = PairContext(z, hub)
    exact = flow_divergence(curl, ctx, x, 0.5)
    fd = finite_difference_divergence(curl, ctx, x, 0.5)
    print(f"divfree divergence: exact {np.max(np.abs(exact)):.2e}, finite difference {np.max(np.abs(fd)):.2e}")
    assert np.max(np.abs(exact)) < 1e-9
    assert np.max(np.abs(fd)) < 1e-5

    direct_div = flow_divergence(model, ctx, x, 0.5)
    assert np.max(np.abs(direct_div)) > 1e-6

    mirrored = FlowModel.create(latent_dim=3, width=4, symmetry="yz", seed=4)
    h = symmetrize(mirrored, x, z)
    assert np.max(np.abs(symmetrize(mirrored, x * MIRROR, z) - h * MIRROR)) < 1e-12
    plane = x.copy()
    plane[:, 0] = 0.0
    assert np.max(np.abs(symmetrize(mirrored, plane, z)[:, 0])) < 1e-12

    try:
        FlowModel.create(latent_dim=3, width=4, mode="divfree", activation="relu")
        raise AssertionError("relu curl model accepted")
    except FlowModelError:
        pass

    print("✅ Flow field test completed!")
    return True


def test_integration():
    """Test RK4 accuracy, dopri5 landing times and round trips"""
    print("=== Testing ODE Integration ===\n")

    x0 = np.ones((1, 3))
    decay = lambda x, t: -x
    exact = math.exp(-1.0)
    rk4 = integrate(decay, x0, (0.0, 1.0), OdeConfig.rk4(10)).final
    dopri = integrate(decay, x0, (0.0, 1.0), OdeConfig.dopri5(1e-10, 1e-10))
    print(f"RK4(10) error {abs(rk4[0, 0] - exact):.2e}, dopri5 error {abs(dopri.final[0, 0] - exact):.2e}")
    assert abs(rk4[0, 0] - exact) < 1e-6
    assert abs(dopri.final[0, 0] - exact) < 1e-8

    marks = [0.25, 0.5, 0.75]
    traj = integrate(decay, x0, (0.0, 1.0), OdeConfig.dopri5(), record_times=marks)
    assert traj.times == [0.0] + marks + [1.0]
    assert abs(traj.states[2][0, 0] - math.exp(-0.5)) < 1e-4

    for span in [(0.5, 0.5), (0.0, 1.5), (-0.1, 0.4)]:
        try:
            integrate(decay, x0, span)
            raise AssertionError(f"span {span} accepted")
        except ValueError:
            pass

    model = FlowModel.create(latent_dim=3, width=4, seed=5)
    ctx = PairContext(np.array([0.2, 0.1, -0.3]), np.zeros(3))
    x = _points(3, 30)
    tight = OdeConfig.dopri5(1e-8, 1e-8)
    back = deform(model, ctx.reversed(), deform(model, ctx, x, tight), tight)
    assert np.max(np.abs(back - x)) < 1e-6

    errors = []
    for steps in (5, 10, 20):
        cfg = OdeConfig.rk4(steps)
        errors.append(np.max(np.abs(deform(model, ctx.reversed(), deform(model, ctx, x, cfg), cfg) - x)))
    assert errors[0] > errors[1] > errors[2]

    snapshots = deform_trajectory(model, ctx, x, OdeConfig.dopri5(), record_times=np.linspace(0, 1, 6)[1:-1])
    assert len(snapshots) == 6

    print("✅ ODE integration test completed!")
    return True


def test_losses_and_gradients():
    """Test the training objectives and end-to-end gradients"""
    print("=== Testing Losses and Gradients ===\n")

    a, b = _points(4, 20), _points(5, 25)
    assert abs(float(chamfer_var(a, b).value) - chamfer(a, b)) < 1e-12
    assert vertex_l2_loss(a, a) == 0.0
    assert abs(vertex_l2_loss(a, a + 0.1) - 0.03) < 1e-12

    cube = unit_cube()
    assert edge_regularizer(cube, cube.vertices) == 0.0
    assert abs(edge_regularizer(cube, cube.vertices * 2.0) - 1.0) < 1e-12

    model = FlowModel.create(latent_dim=2, width=4, seed=6)
    table = np.array([[0.1, 0.0], [0.0, -0.1]])
    loss = hub_spoke_loss(model, table, 0, 1, {0: a, 1: b}, OdeConfig.rk4(3))
    assert np.isfinite(loss) and loss > 0
    try:
        pairwise_terms(model, model.bind(), table[0], table[1], a, b, OdeConfig.rk4(3))
        raise AssertionError("direct pair training with the hub sign accepted")
    except FlowModelError:
        pass

    curl = FlowModel.create(latent_dim=2, width=3, mode="divfree", symmetry="yz", seed=7)
    ctx = PairContext(np.array([0.2, -0.1]), np.zeros(2))
    points = _points(8, 8)
    target = points + 0.05
    cfg = OdeConfig.rk4(3)
    _, grads = integrate_with_grad(curl, ctx, points, cfg, lambda out: chamfer_var(out, target))

    def loss_at(m):
        return float(chamfer_var(Var(deform(m, ctx, points, cfg)), target).value)

    eps = 1e-6
    worst = 0.0
    for name, value in curl.named_tensors():
        index = tuple(0 for _ in value.shape)
        plus, minus = value.copy(), value.copy()
        plus[index] += eps
        minus[index] -= eps
        numeric = (loss_at(curl.with_tensors({name: plus})) - loss_at(curl.with_tensors({name: minus}))) / (2 * eps)
        analytic = float(grads[name][index])
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4))
    print(f"Worst relative gradient error: {worst:.2e}")
    assert worst < 1e-4

    print("✅ Losses and gradients test completed!")
    return True


def test_training_and_checkpoint():
    """Test a short training run, determinism and checkpoint persistence"""
    print("=== Testing Training and Checkpoints ===\n")

    rng = np.random.default_rng(0)
    pairs = sample_pairs(rng, 3, 9)
    assert len(set(pairs)) == 9
    assert len(sample_pairs(rng, 2, 10)) == 4

    try:
        TrainConfig(ode=OdeConfig.dopri5())
        raise AssertionError("adaptive training solver accepted")
    except ValueError:
        pass

    checkpoint, shapes = _toy_space()
    assert len(checkpoint.table) == 2 and checkpoint.step == 3
    again = Trainer(TrainConfig(steps=3, batch_size=2, samples_per_shape=48, latent_dim=2, width=4, seed=3),
                    threads=1).fit(shapes)
    assert checkpoint.to_bytes() == again.to_bytes()

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        for k, shape in enumerate(shapes):
            save_mesh(shape, root / f"shape_{k}.obj")
        manifest = {"shapes": [{"mesh": "shape_0.obj"}, {"mesh": "shape_1.obj"},
                               {"mesh": "shape_0.obj", "split": "test"}]}
        (root / "dataset.json").write_text(json.dumps(manifest), encoding="utf-8")

        config = Config().override({"training.steps": 2, "training.batch_size": 1, "training.checkpoint_every": 1,
                                    "training.samples_per_shape": 32, "flow.latent_dim": 2, "flow.width": 4})
        engine = FlowEngine(config, threads=1)
        trained = engine.train(str(root / "dataset.json"), str(root / "run"))
        assert engine.timer.durations()["train"] >= 0.0
        assert (root / "run" / "manifest.json").exists()
        assert (root / "run" / "checkpoints" / "step_000002" / "tensors.bin").exists()
        with open(root / "run" / "metrics.csv", newline="") as f:
            assert len(list(csv.DictReader(f))) == 2

        loaded = FlowCheckpoint.load(root / "run")
        assert loaded.to_bytes() == trained.to_bytes()
        loaded.save(root / "resaved")
        for name in ("manifest.json", "tensors.bin"):
            assert (root / "run" / name).read_bytes() == (root / "resaved" / name).read_bytes()
        assert [e.mesh for e in loaded.dataset_manifest().split("test")] == ["shape_0.obj"]

        try:
            FlowCheckpoint.load(root / "nowhere")
            raise AssertionError("missing checkpoint loaded")
        except FileNotFoundError:
            pass
        try:
            DatasetManifest.load(root / "nowhere.json")
            raise AssertionError("missing manifest loaded")
        except FileNotFoundError:
            pass

    table = LatentTable(np.zeros((2, 3)))
    replaced = table.with_rows({"latent.1": np.ones(3)})
    assert np.array_equal(replaced[1], np.ones(3)) and np.array_equal(replaced[0], np.zeros(3))

    print("✅ Training and checkpoint test completed!")
    return True


def test_embedding():
    """Test retrieval ordering, embedding and reconstruction on the toy space"""
    print("=== Testing Embedding and Reconstruction ===\n")

    codes = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    assert retrieve_topk(codes, [0.9, 0.0], 2) == [1, 2]
    assert retrieve_topk(np.array([[1.0, 0.0], [-1.0, 0.0]]), [0.0, 0.0], 2) == [0, 1]
    shift = np.array([3.0, -2.0])
    assert retrieve_topk(codes + shift, np.array([0.2, 0.0]) + shift, 3) == retrieve_topk(codes, [0.2, 0.0], 3)
    for k in (0, 4):
        try:
            retrieve_topk(codes, [0.0, 0.0], k)
            raise AssertionError(f"k={k} accepted")
        except ValueError:
            pass

    checkpoint, shapes = _toy_space()
    observation = sample_surface(shapes[0], 60, seed=11)
    cfg = _fast_embed_config()
    trace = embed(checkpoint, observation, cfg, seed=0, shapes=shapes)
    print(f"Embedding objective {trace.initial_objective:.4g} -> {trace.final_objective:.4g}")
    assert trace.code.shape == (2,)
    assert trace.final_objective <= trace.initial_objective
    assert np.array_equal(embed(checkpoint, observation, cfg, seed=0, shapes=shapes).code, trace.code)

    result = reconstruct(checkpoint, observation, cfg, seed=0, shapes=shapes)
    chamfers = [c.chamfer for c in result.candidates]
    assert len(result.candidates) == 2
    assert chamfers == sorted(chamfers)
    assert result.mesh.num_faces == shapes[result.selected.shape_id].num_faces

    try:
        embed(checkpoint, np.zeros((0, 3)), cfg, shapes=shapes)
        raise AssertionError("empty observation embedded")
    except ValueError:
        pass

    distance, consistency = eval_reconstruction(shapes[0], shapes[0], 256, seed=1)
    assert distance == 0.0 and abs(consistency - 1.0) < 1e-12

    print("✅ Embedding and reconstruction test completed!")
    return True


def test_correspondence():
    """Test canonicalization, correspondences and the matching score"""
    print("=== Testing Correspondence ===\n")

    checkpoint, shapes = _toy_space()
    mesh = shapes[0]
    same = correspond(checkpoint, mesh, mesh, (checkpoint.table[0], checkpoint.table[0]), OdeConfig.rk4(4))
    assert np.array_equal(same.indices, np.arange(mesh.num_vertices))

    across = correspond(checkpoint, shapes[0], shapes[1], (checkpoint.table[0], checkpoint.table[1]),
                        OdeConfig.rk4(4))
    assert len(across) == shapes[0].num_vertices
    assert across.indices.max() < shapes[1].num_vertices

    canonical = canonicalize(checkpoint, 0, cfg=OdeConfig.rk4(4), shapes=shapes)
    assert np.array_equal(canonical.faces, mesh.faces)
    at_hub = canonicalize(checkpoint.model, mesh, np.zeros(2))
    assert np.array_equal(at_hub.vertices, mesh.vertices)
    try:
        canonicalize(checkpoint, mesh)
        raise AssertionError("mesh canonicalized without a code")
    except ValueError:
        pass

    box = labeled_box(0.8, subdivisions=1)
    naive = naive_correspond(box, box)
    report = sms(box, box, naive, naive)
    assert report.score == 1.0 and report.matched_pairs == 2 * box.num_vertices

    try:
        sms(mesh, mesh, naive_correspond(mesh, mesh), naive_correspond(mesh, mesh))
        raise AssertionError("unlabeled meshes scored")
    except ValueError:
        pass
    try:
        Correspondence([0, 5], [0.0, 0.1], 3)
        raise AssertionError("index outside the target accepted")
    except ValueError:
        pass

    moved = transfer(checkpoint, mesh, 0, 1, OdeConfig.rk4(4))
    assert moved.num_vertices == mesh.num_vertices
    grid = deformation_grid(checkpoint, shapes, samples=64, cfg=OdeConfig.rk4(4))
    assert grid.shape == (2, 2) and np.all(grid >= 0)

    print("✅ Correspondence test completed!")
    return True


def test_interpolation():
    """Test keyframe fitting, interpolation and frame diagnostics"""
    print("=== Testing Interpolation ===\n")

    source = bending_limb(0.0, sections=6, subdivisions=0)
    target = bending_limb(0.5, sections=6, subdivisions=0)
    cfg = InterpConfig(frames=3, steps=2, width=4, latent_dim=2, supervision_frames=1, ode_steps=2,
                       eval_ode=OdeConfig.rk4(4))
    fit = fit_pair(source, target, cfg, seed=0)
    assert len(fit.history) == 2 and np.isfinite(fit.final_loss)

    with tempfile.TemporaryDirectory() as tmp:
        report = render_animation(fit.model, fit.codes, source, target, cfg, tmp)
        assert len(report.frames) == 3 and len(report.stats) == 3
        assert report.baseline_stats[0].volume_change == 0.0
        assert (Path(tmp) / "frame_0002.obj").exists() and (Path(tmp) / "baseline_0000.obj").exists()
        saved = json.loads((Path(tmp) / "report.json").read_text(encoding="utf-8"))
        assert len(saved["frames"]) == 3 and "effective_config" in saved
        assert saved["endpoint_error"] == report.endpoint_error >= 0.0

    assert np.array_equal(linear_interpolate(source, target, 1.0).vertices, target.vertices)
    assert mean_relative_edge_change(source, source.vertices) == 0.0

    still = fit_pair(source, source, cfg, seed=0)
    assert np.array_equal(still.codes[0], still.codes[1]) and not still.history
    assert np.array_equal(interpolate(still.model, still.codes, source, source, 0.5).vertices, source.vertices)

    try:
        fit_pair(source, icosphere(1), cfg)
        raise AssertionError("keyframes with different vertex counts accepted")
    except ValueError:
        pass
    try:
        InterpConfig(supervision_frames=5, ode_steps=8)
        raise AssertionError("ode_steps not aligned with supervision frames accepted")
    except ValueError:
        pass

    # rendering follows the configured integrator and frame schedule
    configured = Config().override({"ode.eval.rtol": 1e-7, "interpolation.alphas": [0.0, 0.5, 1.0]})
    settings = InterpConfig.from_config(configured).to_dict()
    assert settings["eval_ode"]["rtol"] == 1e-7
    assert settings["alphas"] == [0.0, 0.5, 1.0] and settings["frames"] == 3
    own = Config().override({"interpolation.eval_ode": {"solver": "rk4", "steps": 8}})
    assert InterpConfig.from_config(own).eval_ode.to_dict() == {"solver": "rk4", "steps": 8}

    config = Config().override({"interpolation.steps": 2, "interpolation.width": 4, "interpolation.latent_dim": 2,
                                "interpolation.supervision_frames": 1, "interpolation.ode_steps": 2})
    frames = morph_meshes(source, target, frames=3, config=config)
    assert len(frames) == 3 and all(f.num_vertices == source.num_vertices for f in frames)

    print("✅ Interpolation test completed!")
    return True


def test_analysis():
    """Test the latent projection and the metrics protocol"""
    print("=== Testing Analysis ===\n")

    codes = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 1.0, 0.0]])
    coords, ratio = latent_projection(codes, 2)
    assert coords.shape == (4, 2)
    assert abs(ratio[0] - 0.8) < 1e-12 and abs(ratio[1] - 0.2) < 1e-12
    try:
        latent_projection(codes, 4)
        raise AssertionError("too many projection dims accepted")
    except ValueError:
        pass

    checkpoint, shapes = _toy_space()
    reference = shapes[0]
    report = run_metrics(checkpoint, [reference], ["sphere"], seed=0, observation_points=50,
                         reconstructor=lambda observation, k: reference, eval_samples=256)
    rows = report.to_rows()
    print(f"Self-evaluation row: {rows[0]}")
    assert rows[-1]["shape"] == "mean"
    assert rows[0]["chamfer_l1"] == 0.0
    assert report.means["normal_consistency"] == float(np.mean([r["normal_consistency"] for r in report.rows]))
    try:
        run_metrics(checkpoint, [], reconstructor=lambda observation, k: reference)
        raise AssertionError("empty split accepted")
    except ValueError:
        pass

    model = FlowModel.create(latent_dim=2, width=4, seed=9)
    ctx = PairContext(np.array([0.1, 0.05]), np.zeros(2))
    study = intersection_study(model, ctx, icosphere(1, 0.35), rtols=(1e-4,), rk4_steps=(5,), snapshots=4)
    assert [r.solver for r in study] == ["dopri5", "rk4"]

    print("✅ Analysis test completed!")
    return True


def test_verify_pipeline():
    """Test the invariant suite at reduced sizes"""
    print("=== Testing Verification Pipeline ===\n")

    sizes = {"points": 100, "negation_points": 500, "round_trip_points": 20, "gradient_points": 6,
             "sphere_level": 2, "width": 8, "latent_dim": 4}
    report = quick_verify(seed=0, sizes=sizes)
    for prop in report.properties:
        print(f"  - {prop.name}: {'pass' if prop.passed else 'FAIL'} ({prop.value})")
    assert report.passed, report.failures
    assert report.get("rk4_order") is not None
    assert report.get("intersection_study") is None
    assert report.get("relu_curl_rejected").passed

    table = ReportFormatter().format_verify(report, "table")
    assert "Overall: PASS" in table
    assert json.loads(ReportFormatter().format_verify(report, "json"))["passed"] is True

    print("✅ Verification pipeline test completed!")
    return True


def test_outputs():
    """Test report formatting and exports"""
    print("=== Testing Outputs ===\n")

    formatter = ReportFormatter()
    text = formatter.format_rows([{"shape": "a", "chamfer_l1": 1.0 / 3.0}])
    assert text.splitlines() == ["shape,chamfer_l1", "a,0.333333333"]
    correspondence = Correspondence([2, 0], [0.5, 0.0], 3)
    assert formatter.format_correspondence(correspondence).splitlines()[1:] == ["0,2,0.5", "1,0,0"]

    with tempfile.TemporaryDirectory() as tmp:
        exporter = DataExporter()
        path = exporter.export_code(np.array([0.1, -0.2]), Path(tmp) / "nested" / "code.json")
        payload = json.loads(path.read_text(encoding="utf-8"))
        assert payload["code"] == [0.1, -0.2]
        assert payload["effective_config"]["flow"]["mode"] == "direct"

        model = FlowModel.create(latent_dim=2, width=4, seed=0)
        sphere = icosphere(1, 0.35)
        trajectory = deform_trajectory(model, PairContext(np.array([0.1, 0.0]), np.zeros(2)), sphere.vertices,
                                       OdeConfig.dopri5(), record_times=[0.5])
        index = exporter.export_trajectory(Path(tmp) / "traj", sphere, trajectory)
        snapshots = json.loads(index.read_text(encoding="utf-8"))["snapshots"]
        assert [s["file"] for s in snapshots] == ["t_0000.obj", "t_0001.obj", "t_0002.obj"]
        assert snapshots[0]["intersections"] == 0

    engine = FlowEngine()
    assert engine.export_results() == ""
    box = labeled_box(0.8, subdivisions=0)
    engine.sms(box, box, naive=True)
    exported = json.loads(engine.export_results())
    assert exported["score"] == 1.0 and "effective_config" in exported

    # an operation that raises leaves no duration behind
    timer = OperationTimer()
    with timer.track("verify", study=False):
        pass
    try:
        with timer.track("interpolate", frames=3):
            raise ValueError("keyframes disagree")
    except ValueError:
        pass
    assert set(timer.durations()) == {"verify"} and timer.durations()["verify"] >= 0.0

    print("✅ Outputs test completed!")
    return True


def test_cli():
    """Test the command line surface and its exit codes"""
    print("=== Testing Command Line ===\n")

    from flowmorph.cli import main

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        save_mesh(labeled_box(0.8, subdivisions=1), root / "a.obj")
        save_mesh(labeled_box(0.6, subdivisions=1), root / "b.obj")

        assert main(["correspond", "--naive", "--source", str(root / "a.obj"), "--target", str(root / "b.obj"),
                     "--out", str(root / "pairs.csv")]) == 0
        rows = (root / "pairs.csv").read_text(encoding="utf-8").splitlines()
        assert rows[0] == "source,target,distance"
        assert len(rows) == load_mesh(root / "a.obj").num_vertices + 1

        assert main(["sms", "--naive", "--source", str(root / "a.obj"), "--target", str(root / "b.obj"),
                     "--out", str(root / "sms.json")]) == 0
        score = json.loads((root / "sms.json").read_text(encoding="utf-8"))["score"]
        assert 0.0 <= score <= 1.0

        points = root / "points.xyz"
        np.savetxt(points, _points(0, 20))

        usage_errors = [
            [],
            ["unknown"],
            ["train", "--manifest", str(root / "missing.json"), "--out", str(root / "run")],
            ["embed", "--ckpt", str(root / "missing"), "--points", str(points), "--out", str(root / "code.json")],
            ["correspond", "--source", str(root / "a.obj"), "--target", str(root / "b.obj"),
             "--out", str(root / "x.csv")],
            ["interpolate", "--source", str(root / "a.obj"), "--target", str(root / "missing.obj"),
             "--out", str(root / "anim")],
            ["--config", str(root / "missing.yaml"), "verify"],
        ]
        for argv in usage_errors:
            code = main(argv)
            print(f"  - {' '.join(argv[:2]) or '(no args)'}: exit {code}")
            assert code == 1, argv

    print("✅ Command line test completed!")
    return True


def acceptance_overfit():
    """Two toy shapes, 500 steps: deformed Chamfer-L1 under a quarter of the undeformed baseline"""
    print("=== Acceptance: Hub-and-Spoke Overfit ===\n")

    shapes = list(overfit_pair())
    checkpoint = Trainer(TrainConfig(steps=500, latent_dim=8, width=16, seed=0)).fit(shapes)
    a = sample_surface(shapes[0], 2048, seed=1).points
    b = sample_surface(shapes[1], 2048, seed=2).points
    baseline = chamfer(a, b, "l1_eval")
    moved = deform_through_hub(checkpoint.model, checkpoint.table[0], checkpoint.table[1], a, OdeConfig.dopri5())
    deformed = chamfer(moved, b, "l1_eval")
    print(f"Chamfer-L1: undeformed {baseline:.4g}, deformed {deformed:.4g}")
    assert deformed < 0.25 * baseline

    print("✅ Overfit acceptance completed!")
    return True


def acceptance_embedding():
    """Fresh samples of a training shape retrieve it and reconstruct better than undeformed retrieval"""
    print("=== Acceptance: Embedding and Reconstruction ===\n")

    shapes = list(overfit_pair()) + [labeled_box(0.9, 0.5, 0.5)]
    checkpoint = Trainer(TrainConfig(steps=500, latent_dim=8, width=16, seed=1)).fit(shapes)
    observation = sample_surface(shapes[0], 512, seed=99)
    cfg = EmbedConfig(iterations=60, k=3)
    trace = embed(checkpoint, observation, cfg, seed=0, shapes=shapes)
    assert retrieve_topk(checkpoint.table, trace.code, 1) == [0]

    result = reconstruct(checkpoint, observation, cfg, seed=0, shapes=shapes)
    best_undeformed = min(c.baseline_chamfer for c in result.candidates)
    print(f"Reconstruction {result.selected.chamfer:.4g} vs best undeformed {best_undeformed:.4g}")
    assert result.selected.chamfer <= 0.7 * best_undeformed

    print("✅ Embedding acceptance completed!")
    return True


def acceptance_correspondence_family():
    """Canonical-space SMS at least naive SMS on 80% of labeled box pairs"""
    print("=== Acceptance: Correspondence on the Labeled Box Family ===\n")

    preprocessor = ShapePreprocessor()
    shapes = [preprocessor.process(m)["mesh"] for m in labeled_box_family(8, seed=0, subdivisions=1)]
    checkpoint = Trainer(TrainConfig(steps=300, latent_dim=8, width=16, samples_per_shape=256, seed=2)).fit(shapes)

    pairs = [(i, j) for i in range(len(shapes)) for j in range(len(shapes)) if i != j][:50]
    wins = 0
    for i, j in pairs:
        codes = (checkpoint.table[i], checkpoint.table[j])
        forward = correspond(checkpoint, shapes[i], shapes[j], codes)
        backward = correspond(checkpoint, shapes[j], shapes[i], codes[::-1])
        canonical = sms(shapes[i], shapes[j], forward, backward).score
        naive = sms(shapes[i], shapes[j], naive_correspond(shapes[i], shapes[j]),
                    naive_correspond(shapes[j], shapes[i])).score
        wins += canonical >= naive
    print(f"Canonical SMS >= naive SMS on {wins}/{len(pairs)} pairs")
    assert wins >= 0.8 * len(pairs)

    print("✅ Correspondence acceptance completed!")
    return True


def acceptance_interpolation():
    """Endpoint accuracy, edge regularization, volume drift and intersections of a fitted pair"""
    print("=== Acceptance: Keyframe Interpolation ===\n")

    source, target = bending_limb(0.0), bending_limb(0.8)
    fits = {}
    for weight in (0.0, 2.0):
        cfg = InterpConfig(steps=300, edge_weight=weight, frames=11)
        fits[weight] = (fit_pair(source, target, cfg, seed=0), cfg)

    fit, cfg = fits[2.0]
    end = interpolate(fit.model, fit.codes, source, target, 1.0, cfg.eval_ode)
    baseline = vertex_l2_loss(source.vertices, target.vertices)
    endpoint = vertex_l2_loss(end.vertices, target.vertices)
    print(f"Endpoint vertex-L2 {endpoint:.3g} vs zero-flow {baseline:.3g}")
    assert endpoint < 0.01 * baseline

    halfway = {w: mean_relative_edge_change(source, interpolate(f.model, f.codes, source, target, 0.5,
                                                                c.eval_ode).vertices)
               for w, (f, c) in fits.items()}
    print(f"Edge change at alpha=0.5: {halfway}")
    assert halfway[2.0] <= halfway[0.0]

    report = render_animation(fit.model, fit.codes, source, target, cfg)
    print(f"Volume drift {report.max_volume_drift:.3%} (linear {report.baseline_max_volume_drift:.3%}), "
          f"intersections {report.max_intersections}")
    assert report.max_volume_drift < 5e-3
    assert report.max_intersections == 0

    ctx = PairContext(fit.codes[0], fit.codes[1])
    for row in intersection_study(fit.model, ctx, source):
        print(f"  - {row.solver} {row.setting}: {row.max_intersections} intersections")

    print("✅ Interpolation acceptance completed!")
    return True


def acceptance_determinism():
    """Equal seeds give equal checkpoints; save/load/save is byte-identical"""
    print("=== Acceptance: Determinism and Persistence ===\n")

    shapes = list(overfit_pair(subdivisions=1))
    cfg = TrainConfig(steps=20, latent_dim=8, width=16, samples_per_shape=128, seed=5)
    first = Trainer(cfg, threads=4).fit(shapes)
    second = Trainer(cfg, threads=1).fit(shapes)
    assert first.to_bytes() == second.to_bytes()

    with tempfile.TemporaryDirectory() as tmp:
        first.save(Path(tmp) / "a")
        FlowCheckpoint.load(Path(tmp) / "a").save(Path(tmp) / "b")
        for name in ("manifest.json", "tensors.bin"):
            assert (Path(tmp) / "a" / name).read_bytes() == (Path(tmp) / "b" / name).read_bytes()

    print("✅ Determinism acceptance completed!")
    return True


def acceptance_verify_cli():
    """Full-size verification through the command line"""
    print("=== Acceptance: verify command ===\n")

    from flowmorph.cli import main

    with tempfile.TemporaryDirectory() as tmp:
        report = Path(tmp) / "verify.json"
        assert main(["verify", "--seed", "0", "--report", str(report)]) == 0
        assert json.loads(report.read_text(encoding="utf-8"))["passed"] is True

    print("✅ verify command acceptance completed!")
    return True


def run_all_tests(slow=False):
    """Run all tests"""
    print("🔍 Running FlowMorph Test Suite\n")

    tests = [
        test_configuration,
        test_tape_and_optimizer,
        test_linear_flow_gradient,
        test_geometry,
        test_mesh_io,
        test_preprocessor,
        test_network_derivatives,
        test_flow_field,
        test_integration,
        test_losses_and_gradients,
        test_training_and_checkpoint,
        test_embedding,
        test_correspondence,
        test_interpolation,
        test_analysis,
        test_verify_pipeline,
        test_outputs,
        test_cli,
    ]
    if slow:
        tests += [
            acceptance_verify_cli,
            acceptance_determinism,
            acceptance_overfit,
            acceptance_embedding,
            acceptance_correspondence_family,
            acceptance_interpolation,
        ]

    passed = 0
    failed = 0

    for test in tests:
        try:
            if test():
                passed += 1
            else:
                failed += 1
        except Exception as e:
            print(f"❌ Test {test.__name__} failed with {type(e).__name__}: {e}")
            failed += 1

    print(f"\n{'='*60}")
    print(f"Test Results: {passed} passed, {failed} failed")

    if failed == 0:
        print("🎉 All tests passed! FlowMorph is working correctly.")
    else:
        print("⚠️ Some tests failed. Check the errors above.")

    return failed == 0


if __name__ == "__main__":
    success = run_all_tests(slow="--slow" in sys.argv[1:])
    sys.exit(0 if success else 1)
