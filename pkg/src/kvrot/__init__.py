"""Event-driven simulator for SLO-aware KV-cache rotation on GPU-CPU superchips."""
