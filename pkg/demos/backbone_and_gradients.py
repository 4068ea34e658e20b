"""Build a small backbone, check its gradients, and train it a little.

Walks the lowest layer of the library: parameter initialization, the
forward and backward passes, the finite-difference harness every analytic
gradient in the package is tested against, and the momentum SGD step.
"""

import argparse

import numpy as np

from fedgc.evaluation import finite_diff_check
from fedgc.losses import LossSpec, batch_loss_and_grad
from fedgc.nn import BackboneParams, SgdState, backward, forward, init_backbone, sgd_step


def check_first_layer(params: BackboneParams, x: np.ndarray, probe: np.ndarray) -> float:
    """Finite-difference the probe objective <probe, forward(x)> w.r.t. W1."""

    def objective(w1):
        arrays = params.to_list()
        arrays[0] = w1
        return float((forward(BackboneParams.from_list(arrays, params.activation), x) * probe).sum())

    grad_layers, _ = backward(params, x, probe)
    report = finite_diff_check(objective, params.layers[0][0], grad_layers[0][0])
    return report.max_rel_err


def check_input_gradient(params: BackboneParams, x: np.ndarray, probe: np.ndarray) -> float:
    def objective(x_flat):
        return float((forward(params, x_flat.reshape(x.shape)) * probe).sum())

    _, grad_x = backward(params, x, probe)
    report = finite_diff_check(objective, x.ravel(), grad_x.ravel())
    return report.max_rel_err


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    params = init_backbone([10, 16, 8], seed=args.seed)
    print("backbone layers:", [w.shape for w, _ in params.layers], "activation:", params.activation)

    x = rng.normal(size=(16, 10))
    feats = forward(params, x)
    print(f"forward: {x.shape} -> {feats.shape}, mean |feature| = {np.linalg.norm(feats, axis=1).mean():.3f}")

    probe = rng.normal(size=feats.shape)
    print(f"dL/dW1 vs finite differences: max rel err = {check_first_layer(params, x, probe):.2e}")
    print(f"dL/dx  vs finite differences: max rel err = {check_input_gradient(params, x, probe):.2e}")

    # a few supervised steps against a random 4-class head; loss should fall
    labels = rng.integers(4, size=16)
    head = rng.normal(0.0, 0.5, size=(8, 4))
    spec = LossSpec.softmax()
    state = SgdState(learning_rate=0.1, momentum=0.9)
    print("step  loss")
    for step in range(6):
        feats = forward(params, x)
        lg = batch_loss_and_grad(spec, head, feats, labels)
        grad_layers, _ = backward(params, x, lg.grad_feature)
        flat = params.to_list() + [head]
        gflat = [g for pair in grad_layers for g in pair] + [lg.grad_embeddings]
        new = sgd_step(state, flat, gflat)
        params = BackboneParams.from_list(new[:-1], params.activation)
        head = new[-1]
        print(f"{step:4d}  {lg.loss:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
