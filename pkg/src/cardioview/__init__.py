"""Desk-scale cardiac standard-view acquisition stack.

Labeled heart volumes are sliced by a virtual sector probe, anatomical
features and Gaussian priors score the view, and a double-DQN agent learns
to fine-tune the probe pose.
"""

__version__ = "0.1.0"
