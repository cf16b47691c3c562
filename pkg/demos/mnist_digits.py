"""
Specialised MLPs on handwritten digits
======================================

Ten small MLPs are trained on digits 0-3, each on a set where its own
digit (or pair of digits) makes up 73.2% of the samples. They end up good at
their specialty and poor elsewhere. A selection net then picks k of them per
image.

By default this uses the 10,000 digits bundled under ``data/mnist-10k``.
Point the config at the official IDX files to use the full set.

Run with ``python demos/mnist_digits.py`` (a couple of minutes).
"""

from pathlib import Path

from smartensemble import training
from smartensemble.config import validate_config
from smartensemble.ensemble import collect_predictions

config = validate_config(Path(__file__).resolve().parents[1] / "configs" / "mnist-0-3.json")
splits, _ = training.load_master_splits(config)
train, valid, test = splits
print(f"{len(train)} train / {len(valid)} valid / {len(test)} test images, d = {train.dim}")

##############################################################################
# Training the agents
# -------------------
# Two short epochs on 300 skewed samples each. Longer training would let the
# agents learn the minority classes too and wash out the specialisation.

agents = training.build_agents(config, splits)
for a in agents:
    s = a.train_stats
    print(f"agent {a.id} {str(a.specialty):<7} specialised {s['specialized']:5.1f}  complementary {s['complementary']:5.1f}")
print("mean profile", {k: round(v, 1) for k, v in training.agent_profile(agents).items()})

##############################################################################
# Selection versus fixed rules
# ----------------------------

P_test = collect_predictions(agents, test.features)
print(f"\nUA {training.evaluate('ua', agents, None, test, P=P_test):.2f}")
print(f"MV {training.evaluate('mv', agents, None, test, P=P_test):.2f}")
for k in (1, 2, 4, 10):
    selector = training.train_selector(config, agents, train, valid, k)
    e2e = training.evaluate("e2e-mel", agents, selector, test, P=P_test)
    rs = training.evaluate("rs", agents, None, test, k=k, seed=config.seed, P=P_test)
    print(f"k={k:<2} e2e-MEL {e2e:.2f}  RS {rs:.2f}")
# At k = 10 every agent is selected and e2e-MEL reduces to the unweighted
# average.
