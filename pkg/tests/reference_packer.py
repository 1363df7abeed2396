"""Step-by-step reference for the streaming pool rule, written independently of mmkit.packer.

Plain tuples and loops only, so that agreement with the library is evidence
rather than shared code.
"""

PACKED = (864, 1280)
UNPACKED = (1152, 2048)
CAPACITY = 10


def _largest(pool):
    best = None
    for item in pool:  # pool is in insertion order; strict ">" keeps the earliest on ties
        if best is None or item[1] + item[2] > best[1] + best[2]:
            best = item
    return best


def reference_trace(stream, packed=PACKED, capacity=CAPACITY):
    """``stream`` holds ``(id, enc, dec)`` tuples; returns a list of emitted id tuples."""
    pool, out = [], []
    for item in stream:
        _, enc, dec = item
        if enc > packed[0] or dec > packed[1]:
            out.append((item[0],))
            continue
        partners = [p for p in pool if p[1] + enc <= packed[0] and p[2] + dec <= packed[1]]
        if partners:
            chosen = _largest(partners)
            pool.remove(chosen)
            out.append((chosen[0], item[0]))
            continue
        pool.append(item)
        if len(pool) > capacity:
            big = _largest(pool)
            pool.remove(big)
            out.append((big[0],))
        assert len(pool) <= capacity
    while pool:
        big = _largest(pool)
        pool.remove(big)
        out.append((big[0],))
    return out
