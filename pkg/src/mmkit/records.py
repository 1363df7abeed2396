"""JSONL records for geometric entities.

Entity record::

    {"kind": "box", "fields": {"y1": 0.1, "x1": 0.2, "y2": 0.3, "x2": 0.4}}

Encoded record::

    {"kind": "box", "tokens": [32310, 32410, 32510, 32610]}

Continuous actions and keypoints carry a little layout metadata in the
encoded record (``n_deltas``/``gripper``) so they can be decoded without the
original entity.
"""

from __future__ import annotations

from mmkit.token_space import (
    ActionRanges,
    Box2D,
    CameraPose,
    CodecError,
    ContinuousAction,
    Cuboid3D,
    CuboidNorm,
    DiscreteAction,
    KeypointSet,
    PAPER_SPACE,
    Point2D,
    TokenSpace,
    Tokenizer,
    decode_action,
    decode_box,
    decode_camera_pose,
    decode_cuboid,
    decode_keypoints,
    decode_point,
    encode_action,
    encode_box,
    encode_camera_pose,
    encode_cuboid,
    encode_keypoints,
    encode_point,
)

KINDS = ("point", "box", "cuboid", "pose", "keypoints", "action")


def _num(fields: dict, name: str) -> float:
    try:
        value = fields[name]
    except KeyError:
        raise CodecError(f"missing field {name!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CodecError(f"field {name!r} must be a number")
    return float(value)


def entity_from_record(rec: dict):
    kind = rec.get("kind")
    f = rec.get("fields")
    if not isinstance(f, dict):
        raise CodecError("record needs a 'fields' object")
    if kind == "point":
        return Point2D(_num(f, "y"), _num(f, "x"))
    if kind == "box":
        return Box2D(*(_num(f, k) for k in ("y1", "x1", "y2", "x2")))
    if kind == "pose":
        return CameraPose(_num(f, "theta"), _num(f, "phi"), _num(f, "r"))
    if kind == "cuboid":
        p = f.get("p")
        if not isinstance(p, list):
            raise CodecError("cuboid field 'p' must be a list of 6 numbers")
        return Cuboid3D(*(_num(f, k) for k in ("u", "v", "z", "w_bar", "h_bar", "l_bar")),
                        p=tuple(float(c) for c in p))
    if kind == "keypoints":
        kps = []
        for kp in f.get("keypoints", []):
            kps.append(None if kp is None else Point2D(_num(kp, "y"), _num(kp, "x")))
        return KeypointSet(entity_from_record({"kind": "box", "fields": f.get("person_box", {})}), tuple(kps))
    if kind == "action":
        if "command" in f:
            return DiscreteAction(str(f["command"]))
        return ContinuousAction(tuple(float(d) for d in f.get("deltas", [])), f.get("gripper_open"))
    raise CodecError(f"unknown kind {kind!r}")


def entity_to_record(entity) -> dict:
    if isinstance(entity, Point2D):
        return {"kind": "point", "fields": {"y": entity.y, "x": entity.x}}
    if isinstance(entity, Box2D):
        return {"kind": "box", "fields": {"y1": entity.y1, "x1": entity.x1, "y2": entity.y2, "x2": entity.x2}}
    if isinstance(entity, CameraPose):
        return {"kind": "pose", "fields": {"theta": entity.theta, "phi": entity.phi, "r": entity.r}}
    if isinstance(entity, Cuboid3D):
        return {"kind": "cuboid", "fields": {
            "u": entity.u, "v": entity.v, "z": entity.z,
            "w_bar": entity.w_bar, "h_bar": entity.h_bar, "l_bar": entity.l_bar, "p": list(entity.p)}}
    if isinstance(entity, KeypointSet):
        return {"kind": "keypoints", "fields": {
            "person_box": entity_to_record(entity.person_box)["fields"],
            "keypoints": [None if k is None else {"y": k.y, "x": k.x} for k in entity.keypoints]}}
    if isinstance(entity, DiscreteAction):
        return {"kind": "action", "fields": {"command": entity.command}}
    if isinstance(entity, ContinuousAction):
        return {"kind": "action", "fields": {"deltas": list(entity.deltas), "gripper_open": entity.gripper_open}}
    raise TypeError(f"not a geometric entity: {entity!r}")


class Codec:
    """Entity <-> token record transforms with fixed configuration."""

    def __init__(self, tokenizer: Tokenizer, space: TokenSpace = PAPER_SPACE, r_max: float = 10.0,
                 cuboid_norm: CuboidNorm = CuboidNorm(), action_ranges: ActionRanges = ActionRanges()):
        self.tokenizer = tokenizer
        self.space = space
        self.r_max = r_max
        self.cuboid_norm = cuboid_norm
        self.action_ranges = action_ranges

    def encode(self, rec: dict) -> dict:
        e = entity_from_record(rec)
        s = self.space
        out: dict = {"kind": rec["kind"]}
        if isinstance(e, Point2D):
            out["tokens"] = encode_point(e, s)
        elif isinstance(e, Box2D):
            out["tokens"] = encode_box(e, s)
        elif isinstance(e, CameraPose):
            out["tokens"] = encode_camera_pose(e, self.r_max, s)
        elif isinstance(e, Cuboid3D):
            out["tokens"] = encode_cuboid(e, self.cuboid_norm, s)
        elif isinstance(e, KeypointSet):
            out["tokens"] = encode_keypoints(e, self.tokenizer, s)
            out["person_box"] = encode_box(e.person_box, s)
        elif isinstance(e, DiscreteAction):
            out["tokens"] = encode_action(e, self.tokenizer, self.action_ranges, s)
            out["discrete"] = True
        else:
            out["tokens"] = encode_action(e, self.tokenizer, self.action_ranges, s)
            out["n_deltas"] = len(e.deltas)
            out["gripper"] = e.gripper_open is not None
        return out

    def decode(self, rec: dict) -> dict:
        kind = rec.get("kind")
        tokens = rec.get("tokens")
        if not isinstance(tokens, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in tokens):
            raise CodecError("record needs an integer 'tokens' list")
        s = self.space
        if kind == "point":
            e = decode_point(tokens, s)
        elif kind == "box":
            e = decode_box(tokens, s)
        elif kind == "pose":
            e = decode_camera_pose(tokens, self.r_max, s)
        elif kind == "cuboid":
            e = decode_cuboid(tokens, self.cuboid_norm, s)
        elif kind == "keypoints":
            e = KeypointSet(decode_box(rec.get("person_box", []), s),
                            tuple(decode_keypoints(tokens, self.tokenizer, s)))
        elif kind == "action":
            if rec.get("discrete"):
                e = DiscreteAction(self.tokenizer.decode(tokens))
            else:
                e = decode_action(tokens, int(rec.get("n_deltas", len(tokens))), bool(rec.get("gripper")),
                                  self.action_ranges, s)
        else:
            raise CodecError(f"unknown kind {kind!r}")
        return entity_to_record(e)
