"""CTC from three angles, then the alignment factorization it relies on.

Run with ``python3 demos/01_ctc_and_factorization.py`` (a second or two).
"""

from __future__ import annotations

import numpy as np

from csmoe.ctc import ctc_brute_force, ctc_greedy, ctc_label_posteriors, ctc_loss, ctc_prefix_beam
from csmoe.factorization import correlated_joint, factorization_check, independent_joint

rng = np.random.default_rng(0)

# %% A random 5-frame lattice over blank + two labels
x = rng.standard_normal((5, 3))
lattice = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
target = (1, 2)
print("forward-backward loss :", ctc_loss(lattice, target).item())
print("enumerated alignments :", ctc_brute_force(lattice, target))

# %% Decoding: greedy path collapse versus prefix beam search
print("greedy                :", ctc_greedy(lattice))
for entry in ctc_prefix_beam(lattice, beam=4):
    print(f"beam hypothesis {entry.tokens!s:<12} log p = {entry.ctc_logp:.4f}")
post = ctc_label_posteriors(lattice)
best = max(post, key=post.get)
print("exact argmax          :", best, f"p = {post[best]:.4f}")

# %% Factorizing the code-switching alignment posterior into monolingual parts
# Labels 1, 2 play Mandarin and 3, 4 English.  When the monolingual alignments
# are independent given the input and the merge ignores the input, the
# code-switching posterior equals the composed monolingual posteriors.
ok = factorization_check(independent_joint(rng, (1, 3), frames=3))
print(f"independent joint : lhs {ok.lhs:.6f}  rhs {ok.rhs:.6f}  exact {ok.exact}")
bad = factorization_check(correlated_joint(rng, (1, 3), frames=3))
print(f"correlated joint  : lhs {bad.lhs:.6f}  rhs {bad.rhs:.6f}  gap {bad.gap:.2e}")
