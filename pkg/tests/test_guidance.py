import subprocess
import sys

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff_grad, relative_error
from nifdiff.guidance import (
    DistillConfig,
    ProjectionBranch,
    StubTeacher,
    TeacherConfig,
    TeacherUnavailableError,
    adaptive_weight,
    distance_matrix_loss,
    distill_loss,
    grad_norm,
    make_teacher,
    margin_cosine_loss,
    sample_positions,
)


def _unit(d, n):
    return torch.nn.functional.one_hot(torch.arange(n) % d, d).T.float().view(1, d, 1, n)


def test_projection_shape():
    branch = ProjectionBranch(16, 32, (4, 4))
    assert branch(torch.randn(16, 32, 32)).shape == (32, 4, 4)


def test_pooling_constant_and_block_mean():
    branch = ProjectionBranch(2, 3, (1, 1))
    const = torch.full((1, 2, 6, 6), 3.0)
    assert torch.equal(branch.pool(const), torch.full((1, 2, 1, 1), 3.0))
    blocks = torch.tensor([[1.0, 2.0], [3.0, 10.0]]).repeat_interleave(2, 0).repeat_interleave(2, 1)
    pooled = branch.pool(blocks.expand(1, 2, 4, 4))
    assert torch.allclose(pooled, torch.full((1, 2, 1, 1), 4.0))


def test_pool_target_larger_than_latent_rejected():
    with pytest.raises(ValueError, match="larger"):
        ProjectionBranch(4, 8, (8, 8))(torch.randn(1, 4, 4, 4))


def test_margin_cosine_examples():
    e = torch.eye(4).view(1, 4, 2, 2)
    assert margin_cosine_loss(e, e, 0.5) == 0
    rolled = torch.roll(torch.eye(4), 1, 0).view(1, 4, 2, 2)  # each position orthogonal to its partner
    assert torch.isclose(margin_cosine_loss(e, rolled, 0.5), torch.tensor(0.5))
    assert torch.isclose(margin_cosine_loss(e, -e, 0.5), torch.tensor(1.5))


def test_zero_vectors_never_nan():
    z = torch.zeros(1, 4, 2, 2, requires_grad=True)
    t = torch.randn(1, 4, 2, 2)
    loss = margin_cosine_loss(z, t) + distance_matrix_loss(z, t, K=4)
    loss.backward()
    assert torch.isfinite(loss) and torch.isfinite(z.grad).all()


def test_distance_matrix_examples():
    t = torch.randn(1, 4, 3, 3)
    assert distance_matrix_loss(t, t, K=9) == 0
    # all student vectors parallel -> D_z = 1; teacher one-hot on distinct axes -> D_t = I
    student = torch.ones(1, 4, 2, 2)
    teacher = torch.eye(4).view(1, 4, 2, 2)
    # off-diagonal entries: |1 - 0| - 0.25 = 0.75; diagonal entries: 0
    assert torch.isclose(distance_matrix_loss(student, teacher, K=4, m_dist=0.25), torch.tensor(0.75 * 12 / 16))


def test_distance_matrix_all_ones_vs_all_zeros():
    # parallel student vectors give D_z = 1 everywhere; zero teacher vectors give D_t = 0
    student = torch.ones(1, 4, 3, 3)
    teacher = torch.zeros(1, 4, 3, 3)
    assert torch.isclose(distance_matrix_loss(student, teacher, K=9, m_dist=0.25), torch.tensor(0.75))


def test_distance_margin_absorbs_small_mismatch():
    torch.manual_seed(0)
    t = torch.randn(1, 8, 3, 3)
    s = t + 0.01 * torch.randn_like(t)
    assert distance_matrix_loss(s, t, K=9, m_dist=0.25) == 0


def test_k_sampling_uses_shared_index_without_replacement():
    g = torch.Generator().manual_seed(0)
    idx = sample_positions(100, 10, g)
    assert len(set(idx.tolist())) == 10
    assert torch.equal(sample_positions(5, 10), torch.arange(5))
    torch.manual_seed(0)
    s, t = torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4)
    idx = torch.tensor([3, 7, 11])
    sv = torch.nn.functional.normalize(s.flatten(2).transpose(1, 2)[:, idx], dim=-1)
    tv = torch.nn.functional.normalize(t.flatten(2).transpose(1, 2)[:, idx], dim=-1)
    expected = torch.relu((sv @ sv.transpose(1, 2) - tv @ tv.transpose(1, 2)).abs() - 0.25).mean()
    assert torch.allclose(distance_matrix_loss(s, t, K=3, index=idx), expected)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative_and_scale_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(2, 6, 3, 3, generator=g, dtype=torch.float64)
    t = torch.randn(2, 6, 3, 3, generator=g, dtype=torch.float64)
    scale_s = torch.rand(2, 1, 3, 3, generator=g, dtype=torch.float64) * 10 + 0.1
    scale_t = torch.rand(2, 1, 3, 3, generator=g, dtype=torch.float64) * 10 + 0.1
    cfg = DistillConfig(K=9)
    a = distill_loss(s, t, cfg, torch.Generator().manual_seed(1))
    b = distill_loss(s * scale_s, t * scale_t, cfg, torch.Generator().manual_seed(1))
    assert a[0] >= 0 and a[1] >= 0
    assert torch.allclose(a[0], b[0], atol=1e-12) and torch.allclose(a[1], b[1], atol=1e-12)


def test_margin_cosine_gradient():
    torch.manual_seed(0)
    s = torch.randn(1, 4, 2, 2, dtype=torch.float64, requires_grad=True)
    t = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    fn = lambda x: margin_cosine_loss(x, t, 0.5)  # noqa: E731
    assert fn(s) > 0  # hinge active
    fn(s).backward()
    assert relative_error(s.grad, central_diff_grad(fn, s)) < 1e-3


def test_distance_matrix_gradient():
    torch.manual_seed(3)
    s = torch.randn(1, 4, 2, 2, dtype=torch.float64, requires_grad=True)
    t = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    fn = lambda x: distance_matrix_loss(x, t, K=4, m_dist=0.25)  # noqa: E731
    assert fn(s) > 0
    fn(s).backward()
    assert relative_error(s.grad, central_diff_grad(fn, s)) < 1e-3


def test_adaptive_weight_examples():
    cfg = DistillConfig()
    assert adaptive_weight(1.0, 1.0, cfg) == pytest.approx(0.1 / (1 + 1e-4), rel=1e-12)
    assert adaptive_weight(2.0, 0.0, cfg) == pytest.approx(0.1 * 2.0 / 1e-4)
    assert adaptive_weight(1e9, 0.0, cfg) == pytest.approx(0.1 * 1e8)
    assert adaptive_weight(0.0, 3.0, cfg) == 0.0
    with pytest.raises(ValueError):
        adaptive_weight(-1.0, 1.0, cfg)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e12), st.floats(0, 1e12), st.floats(0, 1))
def test_adaptive_weight_range(g_rec, g_dist, w_base):
    cfg = DistillConfig(w_base=w_base)
    w = adaptive_weight(g_rec, g_dist, cfg)
    assert 0 <= w <= w_base * 1e8 * (1 + 1e-12)
    ratio = g_rec / (g_dist + cfg.delta1)
    if ratio <= 1e8:
        assert w == pytest.approx(w_base * ratio, rel=1e-12)


def test_grad_norm_matches_manual():
    lin = torch.nn.Linear(3, 2)
    x = torch.randn(4, 3)
    loss = lin(x).pow(2).sum()
    n = grad_norm(loss, lin.parameters())
    loss.backward()
    manual = (lin.weight.grad.pow(2).sum() + lin.bias.grad.pow(2).sum()).sqrt()
    assert n == pytest.approx(float(manual), rel=1e-6)


@pytest.mark.parametrize("kwargs", [dict(m_cos=1.5), dict(m_dist=-0.1), dict(K=1), dict(delta1=0.0)])
def test_distill_config_validation(kwargs):
    with pytest.raises(ValueError):
        DistillConfig(**kwargs)


def test_stub_teacher_shape_and_determinism():
    x = torch.rand(3, 32, 32)
    a = StubTeacher(seed=0)(x)
    b = StubTeacher(seed=0)(x)
    assert a.shape == (64, 4, 4)
    assert torch.equal(a, b)
    assert not torch.equal(a, StubTeacher(seed=1)(x))


def test_stub_teacher_identical_across_processes():
    code = (
        "import torch;from nifdiff.guidance import StubTeacher;"
        "x=torch.linspace(0,1,3*32*32).view(3,32,32);"
        "print(StubTeacher(seed=0)(x).double().sum().item())"
    )
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)}
    x = torch.linspace(0, 1, 3 * 32 * 32).view(3, 32, 32)
    assert outs == {f"{StubTeacher(seed=0)(x).double().sum().item()}\n"}


def test_teacher_is_frozen():
    teacher = StubTeacher()
    x = torch.rand(1, 3, 32, 32, requires_grad=True)
    out = teacher(x)
    assert not out.requires_grad
    branch = ProjectionBranch(3, 64, (4, 4))
    loss = margin_cosine_loss(branch(x), out)
    loss.backward()
    assert all(p.grad is None for p in teacher.parameters())


def test_unavailable_teacher_names_backend():
    with pytest.raises(TeacherUnavailableError, match="dinov2"):
        make_teacher(TeacherConfig(backend="dinov2"))
    with pytest.raises(TeacherUnavailableError, match="torchscript"):
        make_teacher(TeacherConfig(backend="torchscript", weights="/nonexistent.pt"))


@pytest.mark.filterwarnings("ignore")
def test_torchscript_teacher_adapter(tmp_path):
    stub = StubTeacher()
    path = tmp_path / "teacher.pt"
    torch.jit.trace(stub, torch.rand(1, 3, 32, 32)).save(str(path))
    teacher = make_teacher(TeacherConfig(backend="torchscript", weights=str(path)))
    x = torch.rand(2, 3, 32, 32)
    assert torch.allclose(teacher(x), stub(x), atol=1e-6)
    assert teacher.grid == (4, 4)
