"""
parallel fan-out over independent work items (stream generation, eval rollouts)

Workers are forked from a multiprocessing.Pool; results come back in input
order, so reports stay order-stable. With one thread everything runs in-process.
"""

import multiprocessing
import time
from typing import Callable, List, Sequence

from timerutil import Timers
from util import get_num_cores, to_time_str

PRINT_INCREMENT_SECS = 5

global_func: Callable = None
global_items: Sequence = ()
global_label = ''
global_start_time = 0.0
shared_num_done = None
shared_next_print_time = None

def init_process(func, items, label, start_time, num_done, next_print_time):
    """init a pool worker"""

    global global_func, global_items, global_label, global_start_time
    global shared_num_done, shared_next_print_time

    global_func = func
    global_items = items
    global_label = label
    global_start_time = start_time
    shared_num_done = num_done
    shared_next_print_time = next_print_time

    Timers.enabled = False

def print_progress(num_done, num_items, label, start_time):
    'one progress line with elapsed time and eta'

    percent = 100 * num_done / num_items
    elapsed = time.perf_counter() - start_time
    eta = elapsed * num_items / max(num_done, 1) - elapsed

    print(f"{label}: {round(percent, 2)}% ({num_done}/{num_items}) Elapsed: {to_time_str(elapsed)}, "
          f"ETA: {to_time_str(eta)}", flush=True)

def run_index(index):
    """worker body: run one item and update shared progress"""

    rv = global_func(global_items[index])
    now = time.perf_counter()

    with shared_num_done.get_lock():
        shared_num_done.value += 1
        num_done = shared_num_done.value

        if now >= shared_next_print_time.value:
            shared_next_print_time.value = now + PRINT_INCREMENT_SECS
            print_progress(num_done, len(global_items), global_label, global_start_time)

    return rv

def resolve_threads(threads):
    'requested worker count capped at the available cores'

    return max(1, min(int(threads), get_num_cores()))

def run_parallel(func: Callable, items: Sequence, threads=1, label='work') -> List:
    """func(item) for every item, results in input order

    func must be a module-level function (picklable).
    """

    num_items = len(items)
    threads = resolve_threads(threads)
    start = time.perf_counter()

    if num_items == 0:
        return []

    if threads == 1 or num_items == 1:
        rv = []
        next_print = start + PRINT_INCREMENT_SECS

        for i, item in enumerate(items):
            rv.append(func(item))

            if time.perf_counter() >= next_print:
                next_print = time.perf_counter() + PRINT_INCREMENT_SECS
                print_progress(i + 1, num_items, label, start)
    else:
        num_done = multiprocessing.Value('i', 0)
        next_print_time = multiprocessing.Value('d', start + PRINT_INCREMENT_SECS)
        init_args = (func, items, label, start, num_done, next_print_time)

        with multiprocessing.Pool(min(threads, num_items), initializer=init_process, initargs=init_args) as pool:
            rv = pool.map(run_index, range(num_items), chunksize=1)

    diff = time.perf_counter() - start
    print(f"{label}: finished {num_items} items on {threads} thread(s) in {to_time_str(diff)}")

    return rv
