"""maskalign: desk-scale text-mask pre-training sandbox.

Subpackages by concern:

* ``numerics`` — float64 tensors, hand-written backprop, gradient checking
* ``maskgen``  — clustering-based text-mask factory (crop / 2-means / calibrate / assemble)
* ``vision``   — image slicing, patch embedding, local-window pixel shuffle
* ``tinyllm``  — character tokenizer and a minimal causal transformer
* ``mgm``      — cross-attention mask head with transposed-conv decoding
* ``trainer``  — synthetic corpus, joint training loop, evaluation
* ``dataio``   — manifests, image/mask persistence, overlay rendering
* ``cli``      — ``maskalign`` command dispatcher
"""

__version__ = "0.1.0"
