#!/usr/bin/env python3
# Check every analytic loss gradient against central finite differences.

# %%
from mrkd.gradcheck import format_table, run_gradcheck

rows, seconds = run_gradcheck(sizes=(2, 10, 100), cases=20)
print(format_table(rows, tolerance=1e-6))
print(f"{seconds:.1f} s")
