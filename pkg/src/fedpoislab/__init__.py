"""fedpoislab: a desk-scale federated learning poisoning lab.

Simulates FedAvg training under data poisoning attacks (label flipping,
noise superimposition, and a conditional-diffusion generator with a
steerable poisoning vector and a compressed "jumping" noise schedule),
and measures both attack effectiveness (global accuracy degradation) and
stealthiness (detector metrics, robust-aggregator behavior).
"""

__version__ = "0.1.0"
