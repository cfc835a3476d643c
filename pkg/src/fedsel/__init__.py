"""Deterministic federated-learning simulator for comparing client-selection
policies: random FedAvg, greedy K-Center, DQN and DQRE-SCnet (ensemble
deep-Q scoring constrained by spectral clusters of client weight updates)."""

__version__ = "0.1.0"
