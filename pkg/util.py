"""
utilities for continual object navigation: errors, seeds, hashing, printing
"""

import hashlib
import os
import struct

import numpy as np
from termcolor import cprint

class ConNavError(Exception):
    """base class for all errors that map to a cli exit code"""

    exit_code = 1

class ContractError(ConNavError):
    """a precondition of an operation was violated"""

    exit_code = 1

class ConfigError(ConNavError):
    """bad or inconsistent configuration"""

    exit_code = 2

class GenerationError(ConfigError):
    """maze parameters are infeasible"""

class DataError(ConNavError):
    """missing, corrupt or inconsistent data files"""

    exit_code = 3

class DecodeError(DataError):
    """file could not be decoded (truncated or corrupt)"""

    def __init__(self, message, position=-1):
        if position >= 0:
            message = f"{message} (at byte {position})"

        super().__init__(message)
        self.position = position

class IntegrityError(DataError):
    """decoded file contradicts its own header"""

class VersionError(DataError):
    """file format version mismatch"""

class VocabularyError(DataError):
    """category or id outside the model's vocabulary"""

class NumericError(ConNavError):
    """non-finite value produced"""

    exit_code = 4

    def __init__(self, message, op='', index=None, shape=None):
        super().__init__(message)
        self.op = op
        self.index = index # first offending multi-index, if known
        self.shape = shape

class DimensionError(NumericError):
    """operand shapes do not conform"""

class SelfCheckError(ConNavError):
    """an invariant suite failed"""

    exit_code = 5

def warn(msg):
    """print a warning"""

    cprint(f"Warning: {msg}", 'yellow')

def fatal(msg):
    """print an error message"""

    cprint(msg, 'red', attrs=['bold'])

def get_num_cores():
    """get num cores available for pool workers"""

    return len(os.sched_getaffinity(0))

def to_time_str(secs):
    'return a string representation of the number of seconds'

    divisors = [1, 60, 60*60, 24*60*60, np.inf]
    labels = ["sec", "min", "hr", "days"]
    digits = [2, 2, 3, 4]
    time_str = ""

    for divisor, digit, label, bound in zip(divisors, digits, labels, divisors[1:]):
        if secs < bound:
            time_str = f"{round(secs / divisor, digit)} {label}"
            break

    return time_str

def sha256_hex(*chunks) -> str:
    """sha256 over a sequence of bytes / str chunks"""

    h = hashlib.sha256()

    for chunk in chunks:
        if isinstance(chunk, str):
            chunk = chunk.encode('utf-8')

        h.update(chunk)

    return h.hexdigest()

# training env seeds live below this bound, evaluation env seeds at or above it
EVAL_SEED_BASE = 2**62

def derive_seed(master_seed: int, index: int, tag: str = 'train') -> int:
    """derive an independent 62-bit seed for (master_seed, index, tag)

    'eval' seeds are shifted into a range disjoint from every other tag
    """

    assert isinstance(master_seed, (int, np.integer)) and isinstance(index, (int, np.integer))

    digest = hashlib.sha256(f"{tag}:{int(master_seed)}:{int(index)}".encode('utf-8')).digest()
    seed = int.from_bytes(digest[:8], 'little') % EVAL_SEED_BASE

    if tag == 'eval':
        seed += EVAL_SEED_BASE

    return seed

class ByteReader:
    """sequential little-endian reader that reports the byte offset of any failure"""

    def __init__(self, buf: bytes, what='file'):
        self.buf = buf
        self.what = what
        self.pos = 0

    def take(self, n) -> bytes:
        'next n raw bytes'

        if n < 0 or self.pos + n > len(self.buf):
            raise DecodeError(f"{self.what} truncated: needed {n} bytes, {len(self.buf) - self.pos} left", self.pos)

        rv = self.buf[self.pos:self.pos + n]
        self.pos += n

        return rv

    def unpack(self, fmt):
        'struct.unpack the next fields'

        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        'next count values as a native-order copy'

        dtype = np.dtype(dtype).newbyteorder('<')
        raw = self.take(dtype.itemsize * int(count))

        return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder('='))

    def text(self):
        'u32 length-prefixed utf-8 string'

        (n,) = self.unpack('<I')
        start = self.pos

        try:
            return self.take(n).decode('utf-8')
        except UnicodeDecodeError:
            raise DecodeError(f"{self.what}: invalid utf-8 text block", start) from None

    def expect_end(self):
        'raise if bytes remain'

        if self.pos != len(self.buf):
            raise DecodeError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes", self.pos)

def pack_text(s: str) -> bytes:
    'u32 length-prefixed utf-8 string'

    raw = s.encode('utf-8')

    return struct.pack('<I', len(raw)) + raw
