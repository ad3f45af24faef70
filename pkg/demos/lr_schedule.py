"""
Warm-up and step decay
======================

The learning rate climbs linearly for ten epochs, holds, then drops by ten
every thirty epochs. Printed as a coarse bar chart on a log scale.
"""

import math
from residual_reid.trainer import ScheduleConfig, lr_at_epoch

schedule = ScheduleConfig()
for epoch in list(range(0, 12)) + [29, 30, 59, 60, 90, 120, 149]:
    lr = lr_at_epoch(epoch, schedule)
    bar = "#" * int(8 * (math.log10(lr) + 8))
    print(f"epoch {epoch:3d}  lr {lr:.3e}  {bar}")
