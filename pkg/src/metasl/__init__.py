"""Meta self-learning for multi-source domain adaptation, desk scale.

Subpackages:
  autodiff    reverse-mode AD engine, optimizers, gradient checker
  recognizer  attention encoder-decoder glyph-sequence recognizer
  domains     five-domain toy dataset generator
  pseudo      pseudo-label pool engine with quality tracking
  meta        warm-up, first-order meta-update, outer step, training loop
  harness     CLI, benchmark/ablation orchestration, curve export
"""

__version__ = "0.1.0"
