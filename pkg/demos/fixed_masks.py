"""Why dropout masks stay fixed while CG runs.

CG builds conjugate directions for one curvature matrix. Drawing new dropout
masks at every CG iteration changes that matrix under its feet, so the
quadratic model phi is no longer guaranteed to decrease. This script runs one
HF iteration in each mode on the same problem and prints the phi traces.

Run: python demos/fixed_masks.py
"""

import numpy as np

from acoustic_cnn.harness import prepare
from acoustic_cnn.optim import HFState, NetworkHFProblem, hf_step

CONFIG = {
    "corpus": {"num_speakers": 4, "utterances_per_speaker": 4, "frames_per_utterance": 60, "spectral_dim": 20},
    "network": {"dropout": {"3": 0.5, "4": 0.5}},
}


def main():
    prep = prepare(CONFIG)
    params = prep.net.init_params(0)
    for mode in ("fixed_per_utterance", "per_cg_iteration"):
        state = HFState(lam=0.05, dropout_mode=mode, cg_max_iters=30)
        result = hf_step(NetworkHFProblem(prep.net, prep.train), params, state)
        phi = np.array(result.trace.phi)
        ups = result.trace.phi_increases()
        print(f"{mode}: {len(phi)} CG iterations, phi {phi[0]:.4f} -> {phi[-1]:.4f}, "
              f"increases at iterations {ups or 'none'}")


if __name__ == "__main__":
    main()
