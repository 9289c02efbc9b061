#include "lcr/common.hpp"

#include <cmath>
#include <numbers>

namespace lcr {

std::string to_hex(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out = "0x";
    for (int shift = 60; shift >= 0; shift -= 4) {
        out.push_back(digits[(v >> shift) & 0xf]);
    }
    return out;
}

uint64_t parse_hex(const std::string& s) {
    size_t pos = (s.rfind("0x", 0) == 0) ? 2 : 0;
    if (pos >= s.size()) throw DataError("empty hex string");
    uint64_t v = 0;
    for (; pos < s.size(); ++pos) {
        char c = s[pos];
        v <<= 4;
        if (c >= '0' && c <= '9') {
            v |= static_cast<uint64_t>(c - '0');
        } else if (c >= 'a' && c <= 'f') {
            v |= static_cast<uint64_t>(c - 'a' + 10);
        } else if (c >= 'A' && c <= 'F') {
            v |= static_cast<uint64_t>(c - 'A' + 10);
        } else {
            throw DataError("invalid hex digit in '" + s + "'");
        }
    }
    return v;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; 1-u keeps log() away from zero.
    double u = 1.0 - uniform();
    double angle = 2.0 * std::numbers::pi * uniform();
    double radius = std::sqrt(-2.0 * std::log(u));
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

}  // namespace lcr
