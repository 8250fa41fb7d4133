"""
Utility functions for the gbm_patch_classifier package.
"""

import time
from typing import List, Sequence, Tuple

import numpy as np


def slice_iterable(iter: Sequence, slice_size: int) -> List[Sequence]:
    '''
    Slices a sequence into smaller sequences of size `slice_size`. The last slice may be shorter.

    Args:
        iter (Sequence): The sequence to slice. Lists, tuples, strings and numpy arrays are accepted.
        slice_size (int): The size of each slice
    '''
    if not isinstance(iter, (list, tuple, str, np.ndarray)):
        raise TypeError('Invalid argument type for `iter`')
    if not isinstance(slice_size, (int, np.integer)):
        raise TypeError('Invalid argument type for `slice_size`')
    if slice_size < 1:
        raise ValueError('`slice_size` should be greater than 0')

    return [iter[i: i + slice_size] for i in range(0, len(iter), slice_size)]


def derive_rng(seed: int, *stream: int | str) -> np.random.Generator:
    '''
    Returns a generator seeded from `seed` and a stream label, so that independent random
    streams (initialisation, splitting, shuffling per epoch, ...) never share state.

    Args:
        seed (int): the run seed.
        *stream: extra integers or short strings identifying the stream.
    '''
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ValueError('`seed` should be a non-negative integer')
    entropy: List[int] = [int(seed)]
    for part in stream:
        if isinstance(part, str):
            entropy.extend(part.encode('utf-8'))
        else:
            entropy.append(int(part))
    return np.random.default_rng(entropy)


def argmax_lowest(values: np.ndarray) -> np.ndarray:
    '''Row-wise argmax, ties resolved toward the lowest index.'''
    # np.argmax returns the first occurrence of the maximum.
    return np.argmax(values, axis=-1)


def get_current_date_time() -> str:
    '''Returns the current date and time in the format: 12/12/2021 12:12:12 (UTC)'''
    return time.strftime("%d/%m/%Y %H:%M:%S (UTC)", time.gmtime())


def format_float(value: float) -> str:
    '''Shortest text form that reads back to the same float.'''
    return repr(float(value))


def parse_float_list(text: str, expected: int | None = None) -> Tuple[float, ...]:
    '''
    Parses a comma separated list of floats.

    Args:
        text (str): e.g. "0.1,0.2,0.3"
        expected (int | None): exact number of values required.
    '''
    values = tuple(float(part) for part in text.split(',') if part.strip())
    if expected is not None and len(values) != expected:
        raise ValueError(f'expected {expected} values, got {len(values)}')
    return values
