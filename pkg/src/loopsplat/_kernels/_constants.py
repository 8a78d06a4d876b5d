ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
ACC_VALID = 1e-4
DEPTH_EPS = 1e-8
# fixed row-chunk count for the backward reduction (thread-count independent)
N_CHUNKS = 16
# gradient slots: d_u, d_v, d_conic_a, d_conic_b, d_conic_c, d_opacity, d_rgb(3), d_z
N_GRAD = 10
