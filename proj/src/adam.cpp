#include "gspull/adam.hpp"

#include <cmath>

namespace gspull {

void Adam::update(ad::Parameter& p, AdamSlot& slot, Real lr) const {
    slot.fit(p.value);
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) return;
    const Real t = static_cast<Real>(step_ < 1 ? 1 : step_);
    const Real c1 = Real(1) - std::pow(beta1, t);
    const Real c2 = Real(1) - std::pow(beta2, t);
    slot.m = beta1 * slot.m + (Real(1) - beta1) * p.grad;
    slot.v = beta2 * slot.v + (Real(1) - beta2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (slot.m.array() / c1) / ((slot.v.array() / c2).sqrt() + epsilon);
}

} // namespace gspull
