import json
import os

import pandas as pd

from config import LOG_FILE, METRICS_FILE, RUN_CONFIG_FILE

METRIC_COLUMNS = ['step', 'lr', 'loss', 'tau', 'beta']


class RunDataManager:
    def __init__(self, base_dir="runs/default"):
        """Initialize run directory holding checkpoints, metrics log and reports"""
        self.base_dir = base_dir
        self.ensure_directories()

    def ensure_directories(self):
        """Create necessary directories if they don't exist"""
        directories = [
            self.base_dir,
            os.path.join(self.base_dir, "checkpoints"),
            os.path.join(self.base_dir, "reports"),
        ]
        for directory in directories:
            os.makedirs(directory, exist_ok=True)

    def get_metrics_filename(self):
        return os.path.join(self.base_dir, METRICS_FILE)

    def get_log_filename(self):
        return os.path.join(self.base_dir, LOG_FILE)

    def get_run_config_filename(self):
        return os.path.join(self.base_dir, RUN_CONFIG_FILE)

    def get_checkpoint_dir(self, tag):
        return os.path.join(self.base_dir, "checkpoints", tag)

    def get_report_filename(self, name):
        return os.path.join(self.base_dir, "reports", name)

    def reset_metrics(self):
        """Start a fresh metrics log for a new run in this directory"""
        filename = self.get_metrics_filename()
        if os.path.exists(filename):
            os.remove(filename)

    def append_metrics(self, row):
        """Append one {step, lr, loss, tau, beta} line to the metrics log"""
        record = {k: row[k] for k in METRIC_COLUMNS}
        with open(self.get_metrics_filename(), 'a', encoding='utf-8') as fh:
            fh.write(json.dumps(record) + '\n')

    def load_metrics(self):
        """Load the metrics log as a DataFrame"""
        filename = self.get_metrics_filename()
        if not os.path.exists(filename) or os.path.getsize(filename) == 0:
            return pd.DataFrame(columns=METRIC_COLUMNS)
        return pd.read_json(filename, lines=True)

    def save_json(self, filename, payload):
        directory = os.path.dirname(os.path.abspath(filename))
        os.makedirs(directory, exist_ok=True)
        with open(filename, 'w', encoding='utf-8') as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write('\n')
        return filename

    def save_run_config(self, config):
        return self.save_json(self.get_run_config_filename(), config)

    def save_report(self, name, payload):
        return self.save_json(self.get_report_filename(name), payload)

    def save_table(self, name, df):
        """Save an experiment table to CSV"""
        filename = self.get_report_filename(name)
        df.to_csv(filename, index=False)
        return filename


def moving_average(series, window=50):
    return series.rolling(window=window, min_periods=1).mean()


def plot_metrics(metrics, output_path, window=50):
    """Loss (raw + moving average), lr, tau and beta against step"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 2, figsize=(11, 7), sharex=True)
    ax = axes[0][0]
    ax.plot(metrics['step'], metrics['loss'], alpha=0.35, label='loss')
    ax.plot(metrics['step'], moving_average(metrics['loss'], window), label=f'{window}-step mean')
    ax.set_title('loss')
    ax.legend()
    for ax, column in zip((axes[0][1], axes[1][0], axes[1][1]), ('lr', 'tau', 'beta')):
        ax.plot(metrics['step'], metrics[column])
        ax.set_title(column)
    for ax in axes[1]:
        ax.set_xlabel('step')
    fig.tight_layout()
    fig.savefig(output_path, dpi=120)
    plt.close(fig)
    return output_path
