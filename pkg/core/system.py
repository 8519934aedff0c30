import os
from datetime import datetime

import psutil

from models.data_classes import ResourceSnapshot


class SystemMonitor:
    """Process and host resource usage via psutil"""

    def __init__(self) -> None:
        self.process = psutil.Process(os.getpid())
        # Prime the counter so the first snapshot reports usage since construction
        self.process.cpu_percent(interval=None)

    def snapshot(self) -> ResourceSnapshot:
        """Current CPU, memory and load figures"""
        memory = psutil.virtual_memory()
        try:
            load = os.getloadavg()
            load_avg = (float(load[0]), float(load[1]), float(load[2]))
        except (OSError, AttributeError):
            load_avg = (0.0, 0.0, 0.0)

        return ResourceSnapshot(
            timestamp=datetime.now().isoformat(),
            cpu_percent=self.process.cpu_percent(interval=None),
            memory_percent=memory.percent,
            rss_bytes=self.process.memory_info().rss,
            load_average=load_avg,
        )

    @staticmethod
    def worker_limit(requested: int) -> int:
        """Cap a worker count at the number of logical CPUs"""
        available = psutil.cpu_count(logical=True) or 1
        return max(1, min(requested, available))
