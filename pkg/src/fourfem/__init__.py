"""Lowest-order nonconforming finite elements for fourth-order problems."""
