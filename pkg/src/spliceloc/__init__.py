"""Video splicing localization toolkit.

Three-stream co-attention encoder-decoder for per-pixel tampering maps,
plus the spliced-video factory, training recipe and evaluation protocol
around it. The numeric core is a self-contained reverse-mode autodiff
tensor library (:mod:`spliceloc.tensor`).
"""

__version__ = "0.1.0"
