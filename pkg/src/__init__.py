"""Federated learning job orchestration: TAG expansion, channels, roles and control plane."""
