"""
A tape in five minutes
======================

Everything in this package differentiates through one reverse-mode tape
over dense float64 arrays. This walkthrough fits a tiny two-layer network
to a fixed regression target with Adam, and cross-checks the analytic
gradients against central finite differences along the way.
"""

import numpy as np

from hiergan.autodiff import AdamState, Tape, Tensor, adam_step, grad_check

rng = np.random.default_rng(0)

# A fixed regression problem: predict the sine of a random projection.
x = rng.standard_normal((64, 3))
target = np.sin(x @ rng.standard_normal((3, 1)))

w1 = Tensor(0.5 * rng.standard_normal((3, 16)), requires_grad=True, name="w1")
w2 = Tensor(0.5 * rng.standard_normal((16, 1)), requires_grad=True, name="w2")
params = [w1, w2]


def objective(tape: Tape, ps) -> Tensor:
    hidden = tape.tanh(tape.matmul(Tensor(x), ps[0]))
    err = tape.sub(tape.matmul(hidden, ps[1]), Tensor(target))
    return tape.mean(tape.mul(err, err))


# One forward pass builds the tape; one reverse sweep yields every gradient.
tape = Tape()
loss = objective(tape, params)
grads = tape.backward(loss)
print(f"initial loss {loss.item():.4f}")
print(f"dL/dw1 shape {grads[w1].shape}, dL/dw2 shape {grads[w2].shape}")

# Finite differences agree coordinate by coordinate.
print(grad_check(objective, params, step=1e-5))

# So Adam can descend with confidence. Tapes are throwaway: one per step.
states = [AdamState.for_param(p) for p in params]
for step in range(1, 201):
    tape = Tape()
    loss = objective(tape, params)
    grads = tape.backward(loss)
    adam_step(params, [grads[p] for p in params], states, lr=0.01)
    if step % 50 == 0:
        print(f"step {step:3d}  loss {loss.item():.4f}")
