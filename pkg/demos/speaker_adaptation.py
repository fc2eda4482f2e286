"""Undoing a speaker's affine distortion with STC + fMLLR.

A GMM is trained on clean frames, then a new speaker's frames are passed
through an unknown affine map. fMLLR, estimated in the STC space, maps them
back so the GMM likelihood recovers.

Run: python demos/speaker_adaptation.py
"""

import numpy as np

from acoustic_cnn.adaptation import adapt_features, estimate_fmllr, estimate_stc, fmllr_objective, train_diag_gmm


def main():
    g = np.random.default_rng(0)
    D = 6
    mix = np.eye(D) + 0.4 * np.tril(g.standard_normal((D, D)), -1)
    centers = g.normal(0.0, 3.0, (4, D))
    clean = centers[g.integers(0, 4, 4000)] + g.standard_normal((4000, D)) @ mix.T

    gmm = train_diag_gmm(clean, 8, 15)
    stc = estimate_stc(gmm, clean, outer_iters=5)
    space = stc.transformed_gmm()
    print(f"STC objective {stc.history[0]:.1f} -> {stc.history[-1]:.1f}")

    A = np.eye(D) + 0.3 * g.standard_normal((D, D))
    speaker = clean[:1000] @ A.T + g.normal(0.0, 1.0, D)
    X = stc.transform(speaker)
    t = estimate_fmllr(space, X, iters=8, speaker_id="new")
    print("fMLLR objective per iteration:", np.round(t.objective_history, 1))
    before = fmllr_objective(space, stc.transform(clean[:1000]), np.eye(D), np.zeros(D))
    print(f"clean-speaker objective for reference: {before:.1f}")
    adapted = adapt_features(speaker, stc, t)
    print("mean abs error to the clean frames: before %.3f, after %.3f"
          % (np.abs(speaker - clean[:1000]).mean(), np.abs(adapted - clean[:1000]).mean()))


if __name__ == "__main__":
    main()
