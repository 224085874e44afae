"""Property-inheritance workbench: stimuli, behavioural metrics and rotation-subspace interventions on toy LMs."""

__version__ = "0.1.0"
