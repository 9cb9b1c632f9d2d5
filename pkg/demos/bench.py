"""Small routing-cost grid; use `unimoe bench` for the full one."""

from unimoe.harness import BenchConfig, bench_route, write_bench_csv

rows = bench_route(BenchConfig(tokens=(256, 1024), experts=16), trials=3)
print(write_bench_csv(rows))
