from __future__ import annotations

import torch

torch.set_num_threads(1)


def central_difference(f, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at ``x`` (float64), one coordinate at a time."""
    x = x.detach().clone().to(torch.float64)
    out = torch.zeros_like(x)
    flat, g = x.view(-1), out.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + h
            fp = float(f(x))
            flat[i] = old - h
            fm = float(f(x))
            flat[i] = old
            g[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-3) -> float:
    """Max coordinate-wise ``|a-b| / max(|a|, |b|, floor)``."""
    a, b = a.to(torch.float64), b.to(torch.float64)
    den = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / den).max())


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
