def encode_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError('varint value must be non-negative')
    buf = bytearray()
    while value > 127:
        buf.append((value & 0x7F) | 0x80)
        value >>= 7
    buf.append(value & 0x7F)
    return bytes(buf)


def decode_varint(data: bytes, offset: int) -> tuple[int, int]:
    value = 0
    shift = 0
    while offset < len(data):
        byte = data[offset]
        value |= (byte & 0x7F) << shift
        offset += 1
        if not (byte & 0x80):
            return value, offset
        shift += 7
    raise ValueError('truncated varint')


def encode_string(text: str) -> bytes:
    payload = text.encode('utf-8')
    return encode_varint(len(payload)) + payload


def decode_string(data: bytes, offset: int) -> tuple[str, int]:
    length, offset = decode_varint(data, offset)
    end = offset + length
    if end > len(data):
        raise ValueError('truncated string')
    return data[offset:end].decode('utf-8'), end


def encode_shape(shape: tuple[int, ...]) -> bytes:
    return encode_varint(len(shape)) + b''.join(encode_varint(dim) for dim in shape)


def decode_shape(data: bytes, offset: int) -> tuple[tuple[int, ...], int]:
    rank, offset = decode_varint(data, offset)
    dims = []
    for _ in range(rank):
        dim, offset = decode_varint(data, offset)
        dims.append(dim)
    return tuple(dims), offset
