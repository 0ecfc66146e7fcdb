import pytest
import torch

from nifdiff.autoencoder import EncoderConfig, NIFAutoencoder, RendererConfig


def central_diff_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            hi = fn(x).item()
            flat[i] = old - eps
            lo = fn(x).item()
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


@pytest.fixture
def tiny_autoencoder():
    torch.manual_seed(0)
    return NIFAutoencoder(EncoderConfig(latent_channels=4, num_blocks=1), RendererConfig(hidden_dim=16, num_blocks=2, num_heads=2, window=4))


def pytest_runtest_logreport(report):
    if report.when == "call":
        for key, value in report.user_properties:
            if key == "acceptance":
                _ACCEPTANCE.append(value)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


_ACCEPTANCE: list[str] = []
