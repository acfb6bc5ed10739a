"""Corridor simulator for dynamic inductive charging (DIC).

Compares an uncoordinated benchmark power allocation against a
receding-horizon MPC allocation solved as a convex QP, on a two-direction
urban corridor with chargeable stripes.
"""

__version__ = "0.1.0"
