"""
Sub-ensemble size on a synthetic task
=====================================

Fifteen scripted agents cover a 5-class problem: one per class and one per
pair of classes. Each is right about 93% of the time on its own classes and
about 25% elsewhere. A selection net learns which agents to trust for each
input, and we compare it with three fixed rules while sweeping the size k of
the chosen sub-ensemble.

Run with ``python demos/synthetic_sweep.py`` (about a minute).
"""

from pathlib import Path

import numpy as np

from smartensemble import training
from smartensemble.config import validate_config

config = validate_config(Path(__file__).resolve().parents[1] / "configs" / "synthetic.json")
(train, valid, test), agents = training.load_master_splits(config)

##############################################################################
# The agents
# ----------
# Every agent is a fixed function of its input, so its accuracy profile is
# known up front.

print("agent  specialty  specialised  complementary  overall")
for a in agents:
    s = a.train_stats
    spec = ",".join(map(str, a.specialty))
    print(f"{a.id:<6} {spec:<10} {s['specialized']:11.1f} {s['complementary']:14.1f} {s['overall']:8.1f}")
profile = training.agent_profile(agents)
print("mean profile", {k: round(v, 1) for k, v in profile.items()})

##############################################################################
# Sweeping k
# ----------
# One selection net is trained per k. UA and MV do not depend on k; RS
# averages a random k-subset per sample.

reports = training.sweep_k(config, agents, (train, valid, test))
print("\n k   e2e-MEL     UA     MV     RS")
for r in reports:
    acc = r.accuracy
    print(f"{r.k:>2} {acc['e2e-mel']:9.1f} {acc['ua']:6.1f} {acc['mv']:6.1f} {acc['rs']:6.1f}")

best = training.best_k(reports)
print(f"\nbest k = {best}")

##############################################################################
# What the net picks
# ------------------
# For each test input, does the chosen sub-ensemble contain an agent that
# specialises in the true class?

selector = training.train_selector(config, agents, train, valid, best)
masks = selector.select(test.features)
experts = np.array([[y in a.specialty for a in agents] for y in test.labels])
print(f"sub-ensembles with a specialist of the true class: {np.mean((masks * experts).sum(1) > 0):.1%}")
# Very small k leaves no room for a second opinion when the first pick is
# wrong. Large k lets the 25%-accurate majority outvote the specialists. The
# best size sits in between.
