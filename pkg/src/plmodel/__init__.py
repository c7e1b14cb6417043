"""Path loss modeling toolkit.

Scenes and an image-method multipath simulator generate labeled path loss
data; empirical baselines (free space, close-in, COST-231 Hata) and
from-scratch regressors (tree, forest, KNN, MLP) are fitted and compared.
"""
__version__ = "0.1.0"
