"""Graph-embedding collaborative ranking over a preference graph.

Ratings become a heterogeneous graph of users, items and pairwise preference
nodes.  NMF factors seed the node signals, a weighted graph convolution
refines them, and a small regression head predicts the unknown
user-preference weights that the Top-N ranking is read off from.
"""

__version__ = "0.1.0"
