"""Norms and duality maps on a whole network, built from atoms and combinators.

Run: python3 demos/modular_norms.py
"""

import json

import numpy as np

from moddual import Atom, GradTree, chain, module_dualize, module_norm, op_norm_rms_rms, pairing

rng = np.random.default_rng(1)

# A three-layer MLP as a composite of atoms; ReLU is a weightless bond.
mlp = chain(Atom("linear", (32, 8)), Atom("relu"), Atom("linear", (32, 32)), Atom("relu"), Atom("linear", (1, 32)))
print("mass", mlp.mass, "sensitivity", mlp.sensitivity)

w = mlp.init(rng)
print(f"modular norm of the initial weights: {module_norm(mlp, w):.3f}")

# Dualizing a gradient gives the steepest unit-norm direction.
g = GradTree([rng.standard_normal(s) for s in mlp.weight_shapes()])
d = module_dualize(mlp, g)
print(f"norm of dualized gradient: {module_norm(mlp, d):.6f}")
print(f"dual norm <g, d>: {pairing(g, d):.3f}")

# Each layer gets the same share of the step in its own operator norm,
# because the masses split the budget evenly.
for atom, leaf in zip(mlp.atoms, d):
    if atom.mass:
        print(f"  {atom.kind.value} {leaf.shape}: RMS->RMS norm of update {op_norm_rms_rms(leaf):.4f}")

# Raising the mass of the last layer steers more of the step into it.
heavy = chain(Atom("linear", (32, 8)), Atom("relu"), Atom("linear", (32, 32)), Atom("relu"), Atom("linear", (1, 32), mass=4.0))
d = module_dualize(heavy, g)
print("update sizes with a heavy head:", [round(op_norm_rms_rms(l), 4) for a, l in zip(heavy.atoms, d) if a.mass])

# The architecture round-trips through plain JSON.
print(json.dumps(mlp.to_dict())[:120], "...")
