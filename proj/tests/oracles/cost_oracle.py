#!/usr/bin/env python3
"""Independent arithmetic for layer cost expectations used in the C++ tests.

Computes conv/dense FLOP (multiply-accumulate) and parameter counts from
first principles, without importing anything from the library under test.
"""

def conv_flops(c_in, w, c_out, s_out):
    return c_in * w * w * c_out * s_out

def conv_params(c_in, w, c_out):
    return c_in * w * w * c_out

def tiny3(num_classes):
    # stages 3->16->32->64, w=3, pad 1, 32x32 input, 2x2 avgpool after each stage
    rows = []
    h = 32
    chans = [(3, 16), (16, 32), (32, 64)]
    for cin, cout in chans:
        s_out = h * h          # stride-1, pad-1 conv keeps spatial size
        rows.append(("conv", cin, cout, s_out,
                     conv_flops(cin, 3, cout, s_out), conv_params(cin, 3, cout)))
        h //= 2                # pool
    feat = 64 * h * h
    rows.append(("dense", feat, num_classes, 1, feat * num_classes, feat * num_classes))
    return rows

if __name__ == "__main__":
    print("conv(3->8,w=3,S=1024) flops =", conv_flops(3, 3, 8, 32 * 32))
    print("conv(3->8,w=3) params      =", conv_params(3, 3, 8))
    print("conv(3->8) half outputs dead params =", conv_params(3, 3, 4))
    total_f = total_p = 0
    for row in tiny3(4):
        print("tiny3", row)
        total_f += row[4]
        total_p += row[5]
    print("tiny3 total flops =", total_f)
    print("tiny3 total params =", total_p)
    # red metric example: student cost = round(221184 * 0.416)
    s = round(221184 * 0.416)
    red = 100.0 * (1.0 - s / 221184)
    print("red example: student", s, "red raw", red)
