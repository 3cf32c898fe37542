#include "mseg/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mseg {

LabelMap::LabelMap(std::vector<std::pair<std::uint16_t, std::uint16_t>> pairs)
    : pairs_(std::move(pairs))
{
    std::set<std::uint16_t> fulls;
    std::set<std::uint16_t> partials;
    for (const auto& [full, partial] : pairs_) {
        if (!fulls.insert(full).second) {
            throw std::invalid_argument("label map: full id " + std::to_string(full) + " is mapped twice");
        }
        if (full == 0) {
            throw std::invalid_argument("label map: background (0) cannot be remapped");
        }
        if (partial == 0) {
            throw std::invalid_argument("label map: partial ids start at 1");
        }
        partials.insert(partial);
    }
    partial_count_ = static_cast<int>(partials.size());
    if (!partials.empty() && *partials.rbegin() != partial_count_) {
        throw std::invalid_argument("label map: partial ids must form the contiguous range 1.."
                                    + std::to_string(partial_count_));
    }
}

LabelMap LabelMap::parse(const std::string& text)
{
    std::vector<std::pair<std::uint16_t, std::uint16_t>> pairs;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        std::istringstream fields(line);
        long full = 0;
        long partial = 0;
        if (!(fields >> full)) {
            continue;
        }
        std::string extra;
        if (!(fields >> partial) || (fields >> extra)) {
            throw std::invalid_argument("label map line " + std::to_string(line_no)
                                        + ": expected 'full_id partial_id'");
        }
        if (full < 0 || full > 65535 || partial < 0 || partial > 65535) {
            throw std::invalid_argument("label map line " + std::to_string(line_no) + ": id out of range");
        }
        pairs.emplace_back(static_cast<std::uint16_t>(full), static_cast<std::uint16_t>(partial));
    }
    return LabelMap(std::move(pairs));
}

LabelMap LabelMap::read(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open label map '" + path.string() + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string LabelMap::to_text() const
{
    std::ostringstream os;
    os << "# full_id partial_id\n";
    for (const auto& [full, partial] : pairs_) {
        os << full << ' ' << partial << '\n';
    }
    return os.str();
}

void LabelMap::write(const std::filesystem::path& path) const
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    out << to_text();
}

std::uint16_t LabelMap::lookup(std::uint16_t full_id) const
{
    for (const auto& [full, partial] : pairs_) {
        if (full == full_id) {
            return partial;
        }
    }
    return 0;
}

LabelVolume extract_partial(const LabelVolume& full, const LabelMap& map)
{
    std::vector<std::uint16_t> table(65536, 0);
    for (const auto& [f, p] : map.pairs()) {
        table[f] = p;
    }
    LabelVolume out(full.dims, map.partial_count() + 1, full.spacing);
    std::transform(full.data.begin(), full.data.end(), out.data.begin(), [&](std::uint16_t id) { return table[id]; });
    return out;
}

} // namespace mseg
