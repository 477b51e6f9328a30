"""
Reverse-mode gradients through a fixed-step Euler solve
=======================================================

The library ships a small tape-based autodiff engine. Here we integrate a
toy controlled ODE with it and check one gradient by finite differences.
"""

import numpy as np

from ctaimpute import diffcore as dc
from ctaimpute.controlpath import path_from_values
from ctaimpute.ncde import EncoderDecoder, Linear, VectorField, euler_solve, initial_state

rng = np.random.default_rng(0)
times = np.linspace(0, 1, 6)
path = path_from_values(times, np.vstack([np.sin(3 * times), times ** 2]))

# latent size 3, decoder size 2, two input channels
fields = EncoderDecoder(
    g_mu=VectorField.init(3, 8, 1, 3, 2, "g_mu", rng),
    k=VectorField.init(2, 8, 1, 2, 3, "k", rng),
    fc_mu=Linear.init(2, 3, "fc_mu", rng),
    fc_d=Linear.init(2, 2, "fc_d", rng),
)


def objective():
    states = euler_solve(initial_state(path.value(0.0)[None], fields), path, fields,
                         step=0.05, output_times=times)
    return dc.sum_(dc.square(states[-1].d))


params = {p.name: p for p in fields.params()}
with dc.Tape() as tape:
    loss = objective()
    grads = dc.backward(loss, tape, params)
print("loss", float(loss.value))

# finite-difference check on one bias entry
w = params["fc_d.bias"]
h = 1e-6
w.value[0] += h
up = float(objective().value)
w.value[0] -= 2 * h
down = float(objective().value)
w.value[0] += h
print("tape    ", grads["fc_d.bias"][0])
print("numeric ", (up - down) / (2 * h))

# Euler is first order: halving the step halves the error
ref = euler_solve(initial_state(path.value(0.0)[None], fields), path, fields,
                  step=1 / 2048, output_times=times, method="rk4")[-1].d.value
for step in (1 / 16, 1 / 32, 1 / 64):
    out = euler_solve(initial_state(path.value(0.0)[None], fields), path, fields,
                      step=step, output_times=times)[-1].d.value
    print(f"step {step:.4f}  error {np.abs(out - ref).max():.2e}")
