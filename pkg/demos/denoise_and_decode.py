"""Build training samples from a multimodal record, then run one guided sampling step.

Run: python demos/denoise_and_decode.py
"""
import numpy as np

from mmkit.decoding import PRESETS, guided_step, softmax, top_p_filter
from mmkit.denoiser import dynamic_decoder_mask, reconstruct, span_corrupt_text
from mmkit.pipeline import ExampleRecord, construct_sample


if __name__ == "__main__":
    rng = np.random.default_rng(0)
    text = list(range(100, 140))
    inputs, targets = span_corrupt_text(text, 0.15, 3.0, rng)
    print("corrupted input ", inputs)
    print("span targets    ", targets)
    assert reconstruct(inputs, targets) == text

    rec = ExampleRecord(text=tuple(text), image=True, audio=True, image_history=2)
    for seed in range(3):
        spec = construct_sample(rec, np.random.default_rng(seed))
        print(f"seed {seed}: target={spec.target} paradigm={spec.paradigm} enc_len={spec.enc_len} "
              f"dec_len={spec.dec_len} kept={spec.kept_inputs}")

    m = dynamic_decoder_mask(6, [2, 4]).allowed
    print("decoder mask with positions 2 and 4 hidden:")
    print(m.astype(int))

    cond, uncond = rng.standard_normal((2, 16))
    kept, _ = top_p_filter(softmax(cond), PRESETS["image_gen"].top_p)
    print("nucleus of the conditional logits:", sorted(kept.tolist()))
    print("guided draw:", guided_step(cond, uncond, rng, PRESETS["image_gen"]))
