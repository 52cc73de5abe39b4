"""Evaluate the L1-norm stability condition for the two simulated vehicles.

The plant estimate per axis is the discrete velocity lag with its input delay
appended as shift-register states, at the controller sample time.

    python3 scripts/check_l1_norm.py [--omega 30] [--m 5] [--kp 2] [--lipschitz 1]
"""

import argparse

import numpy as np
from scipy.linalg import block_diag

from l1transfer.l1 import L1Config, verify_l1_norm_condition
from l1transfer.lti import StateSpaceModel
from l1transfer.plant import PlantModel, source_like, target_like


def velocity_estimate(plant: PlantModel, dt: float) -> StateSpaceModel:
    blocks_a, blocks_b, blocks_c = [], [], []
    for i in range(plant.axes):
        alpha = 1.0 / plant.tau[i] + plant.drag[i]
        beta = plant.gain[i] / plant.tau[i]
        ea = np.exp(-alpha * dt)
        d = int(plant.delay[i])
        A = np.zeros((d + 1, d + 1))
        A[0, 0] = ea
        B = np.zeros((d + 1, 1))
        if d:
            A[0, d] = beta * (1 - ea) / alpha  # oldest buffered input drives v
            A[2:, 1:-1] = np.eye(d - 1)
            B[1, 0] = 1.0
        else:
            B[0, 0] = beta * (1 - ea) / alpha
        C = np.zeros((1, d + 1))
        C[0, 0] = 1.0
        blocks_a.append(A)
        blocks_b.append(B)
        blocks_c.append(C)
    return StateSpaceModel(block_diag(*blocks_a), block_diag(*blocks_b), block_diag(*blocks_c), dt)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--omega", type=float, default=30.0)
    ap.add_argument("--m", type=float, default=5.0)
    ap.add_argument("--kp", type=float, default=2.0)
    ap.add_argument("--lipschitz", type=float, default=1.0)
    args = ap.parse_args()
    cfg = L1Config(m=args.m, omega=args.omega, kp=args.kp, lipschitz=args.lipschitz)
    for plant in (source_like(), target_like()):
        rep = verify_l1_norm_condition(velocity_estimate(plant, cfg.dt_ctrl), cfg)
        axes = " ".join(f"{v:.4f}" for v in rep.per_axis)
        print(f"{plant.name:12s} L*||G||_1 per axis: {axes}  bound {rep.bound:.4f}  "
              f"holds {rep.holds}  spectral radius {rep.spectral_radius:.4f}  tail {rep.tail:.1e}")


if __name__ == "__main__":
    main()
