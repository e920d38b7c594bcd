#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "strudel/error.hpp"
#include "strudel/grid.hpp"
#include "strudel/losses.hpp"

namespace strudel {

/// One training example with its loss route. Images are expected to be
/// normalized already.
struct PoolEntry {
    std::string id;
    Image image;
    Mask label;
    std::optional<Grid<double>> sigma;  ///< rescaled uncertainty; pseudo route only
    losses::Routing routing = losses::Routing::fixed_label;
};

/// D_fix plus the current iteration's pseudo-labeled subset.
class TrainingPool {
public:
    const std::vector<PoolEntry>& fixed() const noexcept { return fixed_; }
    const std::vector<PoolEntry>& pseudo() const noexcept { return pseudo_; }
    std::size_t size() const noexcept { return fixed_.size() + pseudo_.size(); }
    bool empty() const noexcept { return size() == 0; }

    /// The fixed set only grows; entries are never rewritten.
    void add_fixed(PoolEntry e) {
        if (e.sigma || e.routing != losses::Routing::fixed_label)
            throw RoutingError("training_pool", "fixed entries use fixed_label routing without uncertainty");
        check_new_id(e.id);
        fixed_.push_back(std::move(e));
    }

    void set_pseudo(std::vector<PoolEntry> entries) {
        pseudo_.clear();
        for (auto& e : entries) {
            const bool pseudo_route = e.routing == losses::Routing::pseudo_label_with_uncertainty;
            if (pseudo_route != e.sigma.has_value())
                throw RoutingError("training_pool", "pseudo entry '" + e.id + "' routing and uncertainty disagree");
            check_new_id(e.id);
            pseudo_.push_back(std::move(e));
        }
    }

    void clear_pseudo() { pseudo_.clear(); }

    /// Fixed entries followed by pseudo entries.
    std::vector<const PoolEntry*> entries() const {
        std::vector<const PoolEntry*> out;
        out.reserve(size());
        for (const auto& e : fixed_) out.push_back(&e);
        for (const auto& e : pseudo_) out.push_back(&e);
        return out;
    }

private:
    void check_new_id(const std::string& id) const {
        for (const auto* set : {&fixed_, &pseudo_})
            for (const auto& e : *set)
                if (e.id == id) throw Error("training_pool", "sample id '" + id + "' already present in the pool");
    }

    std::vector<PoolEntry> fixed_;
    std::vector<PoolEntry> pseudo_;
};

}  // namespace strudel
