import numpy as np

# one line per system-level criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])


def fd_max_rel_err(make_loss, tensors, eps=1e-6, samples=6, seed=0):
    """Central finite-difference check of d(loss)/d(tensor) entries.

    make_loss() must rebuild the scalar loss from the live tensors each call.
    Returns the worst relative error over sampled entries of every tensor.
    """
    rng = np.random.default_rng(seed)
    loss = make_loss()
    loss.backward()
    grads = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        idxs = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            up = make_loss().item()
            flat[i] = keep - eps
            down = make_loss().item()
            flat[i] = keep
            fd = (up - down) / (2 * eps)
            an = g.reshape(-1)[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    for t in tensors:
        t.grad = None
    return worst
