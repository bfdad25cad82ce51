"""Frozen reference numbers used across the test-suite.

Each value was computed once by an independent route and pasted here, so a
regression in the implementation cannot silently move its own oracle.
"""

import numpy as np

# rigid body, x0 = (pi/4, pi/4, pi/4, 0.1, 0.1, 0.1), horizon 20:
# collocation solve with residual tolerance 1e-8 (12th digit stable under
# further refinement), cross-checked against the LGL transcription at N = 24
# with multiplier-penalty tolerance 1e-6 (agreement 2.6e-6 relative).
RIGID_X0 = np.array([np.pi / 4] * 3 + [0.1] * 3)
RIGID_VALUE = 3.2522585103

# LGL order 4: interior nodes are the roots of 35 x^3 - 15 x (besides 0),
# weights from 2 / (N (N + 1) L_4(t)^2) evaluated with exact rationals:
# L_4(+-1) = 1, L_4(0) = 3/8, L_4(+-sqrt(3/7)) = -3/7.
LGL4_NODES = np.array([-1.0, -np.sqrt(3 / 7), 0.0, np.sqrt(3 / 7), 1.0])
LGL4_WEIGHTS = np.array([1 / 10, 49 / 90, 32 / 45, 49 / 90, 1 / 10])

# J^-1 B e1 for the default rigid body: (1/2, (1/15)/3, (1/10)/4)
RIGID_WDOT_E1 = np.array([0.5, 1 / 45, 1 / 40])
