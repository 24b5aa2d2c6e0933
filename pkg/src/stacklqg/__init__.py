"""Leader-follower (Stackelberg) LQG games where the leader observes more than the follower."""
__version__ = "0.1.0"
