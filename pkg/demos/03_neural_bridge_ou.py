"""
Learning the missing drift: an Ornstein-Uhlenbeck bridge
========================================================

The guided proposal for an OU process uses a Brownian auxiliary, so it
misses part of the true bridge drift. A small network sigma theta(t, x)
fills the gap. It is trained by minimizing a Monte-Carlo KL loss through the
unrolled Euler-Maruyama solver. For OU both the optimal correction and the
smallest attainable loss are known in closed form, so progress can be read
off directly.
"""
import numpy as np

from bridgesim.config import load_config
from bridgesim.guided import sample_neural_states
from bridgesim.models import optimal_theta_and_bound
from bridgesim.network import theta_forward
from bridgesim.sde import wiener_increments
from bridgesim.training import TrainConfig, train

cfg = load_config("ou_bridge")
sys_ = cfg.system()
theta_opt, bound = optimal_theta_and_bound(cfg.model, cfg.obs, cfg.x0)
print(f"loss lower bound {bound:.4f}")

# A shortened run; the bundled config trains for 1000 iterations.
tc = TrainConfig(**{**cfg.train.to_dict(), "iterations": 300})
trace = train(sys_, cfg.arch, tc,
              callback=lambda k, loss, g, s: k % 50 == 0 and print(f"  iter {k:4d}  loss {loss:.4f}"))
print(f"mean of last 50 losses {trace.window_mean(50):.4f} in {trace.wall_time:.1f} s")

# The learned map against the optimum at mid-horizon, where the bridge lives.
xs = np.linspace(0.2, 0.8, 4)
print("x:       ", xs)
print("learned: ", np.round(theta_forward(trace.params, 0.5, xs[:, None])[:, 0], 3))
print("optimal: ", np.round(theta_opt(0.5, xs), 3))

# Samples are drawn with no weights and no accept/reject step.
states = sample_neural_states(sys_, trace.params, wiener_increments(sys_.grid, 1, 1, range(2000)))
print(f"endpoint |X_T - v| mean {np.abs(states[:, -1, 0] - 1.0).mean():.2e}")
