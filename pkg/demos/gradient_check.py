"""Finite-difference check of every training loss, then the same check with a broken adjoint.

The second pass scales the gradient of ``square`` by 1.1; the reconstruction
losses depend on it and must be reported as failing.
"""

from flare import gradsuite

print("correct adjoints")
for r in gradsuite.run(seed=0):
    print(" ", r.line())

print("square adjoint scaled by 1.1")
with gradsuite.faulty_adjoint("square", 1.1):
    for r in gradsuite.run(seed=0, cases=("recon_s", "proto")):
        print(" ", r.line())
