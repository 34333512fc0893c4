"""CT perfusion to MR translation with a conditional GAN, and lesion segmentation on top of it.

Everything runs on a small numpy autodiff core (:mod:`ctmr.tensor`).
"""
__version__ = "0.1.0"
