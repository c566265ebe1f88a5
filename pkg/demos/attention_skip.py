"""The attention skip lets each decoder location read from anywhere in the encoder map.

Run: python3 demos/attention_skip.py
"""

import torch

from vidpred.predictor import AttentionSkip, attention_skip

torch.manual_seed(0)
block = AttentionSkip(dec_ch=8, enc_ch=8, qk_dim=8)
dec = torch.randn(1, 8, 4, 4)
enc = torch.randn(1, 8, 4, 4)

w = block.attention_weights(dec, enc)[0, 0]  # 16 queries x 16 keys
print("attention map", tuple(w.shape), "row sums", w.sum(-1)[:4].tolist())
print("most attended key for each query:", w.argmax(-1).tolist())

# no positional encoding: shuffling encoder locations leaves the output unchanged
perm = torch.randperm(16)
shuffled = enc.flatten(2)[..., perm].reshape_as(enc)
with torch.no_grad():
    same = torch.allclose(attention_skip(dec, enc, block), attention_skip(dec, shuffled, block), atol=1e-6)
print("invariant to encoder location order:", same)

# with the output projection zeroed the block is an exact identity on the decoder path
with torch.no_grad():
    block.out.weight.zero_()
print("zeroed output projection gives identity:", torch.equal(attention_skip(dec, enc, block), dec))
