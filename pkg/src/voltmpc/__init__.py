"""voltmpc: a desk-scale grid voltage-control workbench.

Pieces: an AC power-flow plant simulator, online least-squares estimation of
line admittances from flow measurements, a centralized one-step-ahead MPC,
a neighbor-communication ADMM variant of the same controller, and a droop
volt-var baseline, wired together by a closed-loop scenario driver and CLI.
"""

__version__ = "0.1.0"
