"""Verification lab for complementary-masking domain adaptation at desk scale.

Modules:
  autograd  - tape-based reverse-mode engine over float64 numpy arrays
  masks     - patch-structured binary masks and mask pairs
  theory    - Monte-Carlo harnesses for the masking statistics
  recovery  - compressed-sensing comparison of mask kinds
  datagen   - synthetic domain-shifted segmentation data
  trainer   - mean-teacher masked-consistency training loop
  metrics   - confusion-based segmentation metrics
  cli       - batch entry point with reproducible configs
"""

__version__ = "0.1.0"
