'''
Timer utility functions. Timers accumulate wall time per name and can be
refered to statically using Timers.tic(name) and Timers.toc(name)

The @timed decorator wraps entire functions (with proper exception handling)
'''

import time
from functools import wraps

from termcolor import cprint

def timed(name_or_f=None):
    'decorator for automatic timing of entire functions'

    def make_wrapper(f, name):
        'wrap a function with timers'

        @wraps(f)
        def wrapped_f(*args, **kwargs):
            'wrapped function'

            Timers.tic(name)

            try:
                return f(*args, **kwargs)
            finally:
                Timers.toc(name)

        return wrapped_f

    if isinstance(name_or_f, str):
        return lambda f: make_wrapper(f, name_or_f)

    assert callable(name_or_f)

    return make_wrapper(name_or_f, name_or_f.__name__)

class TimerData():
    'accumulated time for one timer name'

    def __init__(self, name):
        self.name = name
        self.total_secs = 0.0
        self.num_calls = 0
        self.depth = 0 # re-entrant calls only count the outermost span
        self.last_start_time = None

class Timers():
    '''
    a static class for wall-time measurements. Use Timers.tic(name) and
    Timers.toc(name) to start and stop timers, use print_stats to print them
    '''

    timers = {} # name -> TimerData, in first-use order
    enabled = True

    def __init__(self):
        raise RuntimeError('Timers is a static class; should not be instantiated')

    @staticmethod
    def reset():
        'reset all timers'

        Timers.timers = {}

    @staticmethod
    def tic(name):
        'start a timer'

        if not Timers.enabled:
            return

        td = Timers.timers.get(name)

        if td is None:
            td = Timers.timers[name] = TimerData(name)

        if td.depth == 0:
            td.num_calls += 1
            td.last_start_time = time.perf_counter()

        td.depth += 1

    @staticmethod
    def toc(name):
        'stop a timer'

        if not Timers.enabled:
            return

        td = Timers.timers.get(name)

        if td is None or td.depth == 0:
            raise RuntimeError(f"Timer stopped without being started: {name}")

        td.depth -= 1

        if td.depth == 0:
            td.total_secs += time.perf_counter() - td.last_start_time
            td.last_start_time = None

    @staticmethod
    def total_secs(name):
        'total seconds accumulated by the named timer (0 if unknown)'

        td = Timers.timers.get(name)

        return 0.0 if td is None else td.total_secs

    @staticmethod
    def print_stats(total_name=None):
        'print statistics about performance timers to stdout'

        if not Timers.timers:
            print("No timers recorded.")
            return

        if total_name is not None:
            total = Timers.total_secs(total_name)
        else:
            total = max(td.total_secs for td in Timers.timers.values())

        total = max(total, 1e-9)

        for td in sorted(Timers.timers.values(), key=lambda t: -t.total_secs):
            percent = 100 * td.total_secs / total
            line = f"{td.name.capitalize()} Time ({td.num_calls} calls): {td.total_secs:.2f} sec ({percent:.1f}%)"

            if percent > 25.0:
                cprint(line, 'red', attrs=['bold'])
            elif percent < 5.0:
                cprint(line, 'white', attrs=['dark'])
            else:
                cprint(line, None)
