#pragma once

#include <stdexcept>
#include <string>

namespace derain {

// All failures are reported as runtime_error with a "slug: detail" message.
// The slug is a stable machine-parsable category; the CLI prefixes it with
// "error: " on stderr.
[[noreturn]] inline void fail(const std::string& slug, const std::string& detail) {
    throw std::runtime_error(slug + ": " + detail);
}

}  // namespace derain
