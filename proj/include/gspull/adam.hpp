#pragma once

#include "gspull/tape.hpp"

#include <vector>

namespace gspull {

// First and second moment estimates for one parameter, row-aligned with it.
struct AdamSlot {
    Mat m;
    Mat v;

    void fit(const Mat& like) {
        if (m.rows() != like.rows() || m.cols() != like.cols()) {
            m = Mat::Zero(like.rows(), like.cols());
            v = Mat::Zero(like.rows(), like.cols());
        }
    }
};

// Adaptive-moment optimizer. One instance serves every parameter group; the
// bias-correction step counter is shared across groups.
class Adam {
public:
    Real beta1 = Real(0.9);
    Real beta2 = Real(0.999);
    Real epsilon = Real(1e-15);

    // Bumps the shared step counter; call once per iteration before update().
    void tick() { ++step_; }
    long step() const { return step_; }
    void set_step(long s) { step_ = s; }

    void update(ad::Parameter& p, AdamSlot& slot, Real lr) const;

private:
    long step_ = 0;
};

} // namespace gspull
