# sdclab
"""
Deterministic simulator of silent data corruption in tensor-parallel
transformer training: paired healthy/unhealthy nodes, statistical fault
injection, mismatch and gradient-noise metrics, and checksummed matmuls.
"""

__version__ = "1.0.0"
