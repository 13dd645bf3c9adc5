"""Hybrid neural/analytical reflectance models.

Analytical BRDF models are represented as small computational graphs whose
nodes and operators can be individually replaced by compact MLPs; a greedy
hypercube search over the binary replacement states picks where the neural
capacity pays off when fitting measured or synthetic reflectance data.
"""

__version__ = "0.1.0"
