#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fedsem {

enum class Phase { phase1, phase2 };

std::string to_string(Phase phase);
Phase phase_from_string(const std::string& name);

// Evaluation of the global model after one round.
struct RoundRecord {
    std::size_t round = 0;  // 1-based, counted across both phases
    Phase phase = Phase::phase1;
    double test_accuracy = 0.0;
    double test_loss = 0.0;
    std::vector<std::size_t> participant_ids;  // ascending
    std::uint64_t wall_ms = 0;

    bool operator==(const RoundRecord&) const = default;
};

using History = std::vector<RoundRecord>;

}  // namespace fedsem
