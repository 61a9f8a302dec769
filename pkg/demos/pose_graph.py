"""
Closing a square with pose-graph optimization
=============================================

Four odometry edges walk around a 10 m square.  A small yaw bias in each edge
leaves the loop open; a single loop-closing constraint pulls it shut.
"""
import numpy as np

from scanweave.posegraph import Constraint, PoseGraph
from scanweave.se3 import Pose

step = Pose.from_rotvec([0.0, 0.0, np.pi / 2], [10.0, 0.0, 0.0])
biased = Pose.from_rotvec([0.0, 0.0, np.pi / 2 + 0.03], [10.0, 0.0, 0.0])

g = PoseGraph()
x = Pose()
g.add_node(0, x, fixed=True)
for k in range(1, 5):
    x = x @ biased
    g.add_node(k, x)
    g.add_constraint(Constraint(k, k - 1, biased, np.eye(6)))
print(f"dead-reckoned end point: {np.round(g.pose(4).t, 3)} (should be the origin)")

# Node 4 revisits node 0; the loop edge is much more certain than odometry.
g.add_constraint(Constraint(4, 0, Pose(), 100.0 * np.eye(6)))
print(f"chi2 before: {g.chi2():.3f}")
summary = g.optimize(15)
print(f"chi2 after {summary.iterations} LM iterations: {summary.final_chi2:.5f}")
for k in range(5):
    print(k, np.round(g.pose(k).t, 3))
