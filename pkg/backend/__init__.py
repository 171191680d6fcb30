"""HTTP service and run registry over the offloading library."""
