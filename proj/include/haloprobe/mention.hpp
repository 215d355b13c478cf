#pragma once

#include <cstddef>
#include <optional>
#include <string>

namespace haloprobe {

enum class ObjectLabel : int { hallucinated = 0, correct = 1 };

inline int to_int(ObjectLabel label) noexcept { return static_cast<int>(label); }

/// One aligned object word in a caption.
///
/// `token_index` is the first sub-token of the word, which is also its
/// position t. `repetition` counts occurrences of the category so far in
/// the caption (1-based), so `first_occurrence` is exactly `repetition == 1`.
struct ObjectMention {
    std::string category;
    std::string surface;
    int token_index = -1;
    std::size_t char_begin = 0;
    std::size_t char_end = 0;
    int repetition = 1;
    bool first_occurrence = true;
    std::optional<ObjectLabel> label;

    int position() const noexcept { return token_index; }

    bool operator==(const ObjectMention&) const = default;
};

}  // namespace haloprobe
