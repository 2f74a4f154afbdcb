# Config package