"""Distribution-level market clearing with bus-level locational prices."""
