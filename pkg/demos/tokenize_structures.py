"""Encode a few structured outputs into location tokens and back.

Run: python demos/tokenize_structures.py
"""
from mmkit.token_space import (
    PAPER_SPACE as S,
    Box2D,
    ByteTokenizer,
    ContinuousAction,
    Cuboid3D,
    decode_action,
    decode_box,
    decode_cuboid,
    encode_action,
    encode_box,
    encode_cuboid,
)


def show(name, tokens, decoded):
    local = [S.loc_index(t) if S.is_location(t) else t for t in tokens]
    print(f"{name:<8} {len(tokens):2d} tokens  local ids {local}")
    print(f"{'':8} decoded  {decoded}")


if __name__ == "__main__":
    box = Box2D(0.12, 0.30, 0.58, 0.91)
    toks = encode_box(box)
    show("box", toks, decode_box(toks))

    cub = Cuboid3D(0.5, 0.4, 23.7, 0.8, -1.2, 0.1, p=(1.0, 0.0, 0.0, 0.0, 1.0, 0.0))
    toks = encode_cuboid(cub)
    show("cuboid", toks, decode_cuboid(toks))

    tok = ByteTokenizer()
    act = ContinuousAction((0.05, -0.2, 0.0, 0.0, 0.0, 1.57), gripper_open=True)
    toks = encode_action(act, tok)
    show("action", toks, decode_action(toks, 6, True))
