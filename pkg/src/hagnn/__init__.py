"""Graph-neural-network prediction of diagnostic conversion from
longitudinal functional-connectivity scans with irregular visit gaps."""

__version__ = "0.1.0"
