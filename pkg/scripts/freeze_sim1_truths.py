"""Regenerate the frozen truth constants for the four-period study.

Run from the repository root:

    python3 scripts/freeze_sim1_truths.py

and paste the printed dict into SIM1_TRUTHS in src/gattlab/simlab.py.
The oracle seed and draw count are fixed so the values are reproducible.
"""

from gattlab.simlab import DgpSpec, compute_true_gatt, sim1_conditioning, sim1_policy

M = 10**7
SEED = 20240817


def main() -> None:
    dgp = DgpSpec(kind="sim1")
    policy = sim1_policy()
    print("SIM1_TRUTHS = {")
    for level in range(6):
        out = compute_true_gatt(
            dgp, policy, sim1_conditioning(level), M=M, seed=SEED
        )
        print(
            f"    {level}: ({out['theta_true']:.8f}, {out['mc_se']:.3e}),"
        )
    print("}")


if __name__ == "__main__":
    main()
