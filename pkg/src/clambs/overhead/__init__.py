from .model import (
    FLAT, TREE, CpuLoad, DataCenter, TopologySpec, TreeModel, comm_overhead_fixed,
    comm_overhead_variable, comm_time, cpu_load, depth_sum, distributed_manager_overhead,
    response_time_avg, response_time_total, search_time_avg, select_reporting_subset,
    should_report, summary, tree_levels, with_reporting_subsets,
)

__all__ = [
    "FLAT", "TREE", "CpuLoad", "DataCenter", "TopologySpec", "TreeModel",
    "comm_overhead_fixed", "comm_overhead_variable", "comm_time", "cpu_load", "depth_sum",
    "distributed_manager_overhead", "response_time_avg", "response_time_total",
    "search_time_avg", "select_reporting_subset", "should_report", "summary",
    "tree_levels", "with_reporting_subsets",
]
