"""Desk-scale meta-learned in-context learner: episodic data, a non-causal
transformer trained with hand-written backprop, offline / sequential /
unsupervised training regimes, forgetting metrics, dataset-distance
curricula and a class-overlap audit."""

__version__ = "0.1.0"
