"""Meta-experience learning on verifiable-reward tasks."""
