"""
plotting for eval reports and training logs
"""

import matplotlib
matplotlib.use('Agg')

import numpy as np
import matplotlib.pyplot as plt

from timerutil import timed

class Plotter:
    """object in charge of plotting; one figure with four panels"""

    def __init__(self):
        plt.style.use('bmh')

        self.fig, self.ax_list = plt.subplots(2, 2, figsize=(12, 8))

    @timed
    def plot_icl_curve(self, report, label, color=None):
        """success rate per start-step bucket"""

        ax = self.ax_list[0][0]
        xs = []
        ys = []

        for bucket in report['icl_curve']:
            if bucket['success_rate'] is not None:
                xs.append(bucket['bucket_start'])
                ys.append(bucket['success_rate'])

        ax.plot(xs, ys, '-o', color=color, label=label)
        ax.set_xlabel("task start step")
        ax.set_ylabel("success rate")
        ax.set_ylim(-0.05, 1.05)
        ax.legend(loc='lower right')

    @timed
    def plot_rsd_bars(self, labels, rsds):
        """memory-norm RSD per run (None bars are skipped)"""

        ax = self.ax_list[0][1]
        xs = np.arange(len(labels))
        heights = [0.0 if r is None else r for r in rsds]

        ax.bar(xs, heights, color='tab:blue')
        ax.set_xticks(xs)
        ax.set_xticklabels(labels, rotation=20)
        ax.set_ylabel("memory norm RSD")

    @timed
    def plot_norm_trace(self, trace, label, color=None):
        'memory norm against stream step'

        ax = self.ax_list[1][0]
        ax.plot(np.arange(len(trace)), trace, '-', color=color, label=label, linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("memory norm")
        ax.legend(loc='upper left')

    @timed
    def plot_losses(self, rows, label, color=None):
        'training loss per optimizer step, from read_log() rows'

        ax = self.ax_list[1][1]
        steps = [int(r['step']) for r in rows]
        losses = [float(r['loss']) for r in rows]

        ax.plot(steps, losses, '-', color=color, label=label, linewidth=0.8)
        ax.set_xlabel("optimizer step")
        ax.set_ylabel("loss")
        ax.legend(loc='upper right')

    def save(self, path):
        'write the figure and close it'

        self.fig.tight_layout()
        self.fig.savefig(path)
        plt.close(self.fig)
