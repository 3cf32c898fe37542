#include "mseg/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace mseg {

namespace fs = std::filesystem;

std::uint64_t phantom_case_seed(std::uint64_t seed, int index)
{
    return derive_seed(seed, "phantom.case", static_cast<std::uint64_t>(index));
}

namespace {

std::string case_name(int index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%04d", index);
    return buf;
}

} // namespace

std::vector<fs::path> write_phantom_set(const fs::path& dir, const PhantomSetOptions& o)
{
    if (o.count < 0 || o.first_index < 0) {
        throw std::invalid_argument("phantom set: count and first index must be >= 0");
    }
    o.spec.validate();
    fs::create_directories(dir);
    std::vector<fs::path> written;
    nlohmann::json cases = nlohmann::json::array();
    for (int i = o.first_index; i < o.first_index + o.count; ++i) {
        PhantomSpec spec = o.spec;
        spec.seed = phantom_case_seed(o.seed, i);
        const Phantom ph = generate_phantom(spec);
        const fs::path c = dir / case_name(i);
        fs::create_directories(c);
        write_volume(c / "image.msegvol", ph.image);
        written.push_back(c / "image.msegvol");
        if (o.partial_only) {
            write_volume(c / "partial.msegvol", extract_partial(ph.labels, ph.map));
            written.push_back(c / "partial.msegvol");
        } else {
            write_volume(c / "labels.msegvol", ph.labels);
            ph.map.write(c / "labels.map");
            written.push_back(c / "labels.msegvol");
            written.push_back(c / "labels.map");
        }
        cases.push_back({{"case", case_name(i)}, {"seed", spec.seed}});
    }
    nlohmann::json manifest{{"count", o.count},
                            {"first_index", o.first_index},
                            {"seed", o.seed},
                            {"anatomy_seed", o.spec.anatomy_seed},
                            {"size", o.spec.size},
                            {"structures", o.spec.num_structures},
                            {"partial", o.spec.partial_subset},
                            {"noise_sigma", o.spec.noise_sigma},
                            {"partial_only", o.partial_only},
                            {"cases", cases}};
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write '" + (dir / "manifest.json").string() + "'");
    }
    out << manifest.dump(2) << '\n';
    written.push_back(dir / "manifest.json");
    return written;
}

std::vector<fs::path> list_cases(const fs::path& dir)
{
    if (!fs::is_directory(dir)) {
        throw std::runtime_error("data directory '" + dir.string() + "' does not exist");
    }
    std::vector<fs::path> cases;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory() && fs::exists(e.path() / "image.msegvol")) {
            cases.push_back(e.path());
        }
    }
    std::sort(cases.begin(), cases.end());
    return cases;
}

std::vector<PartialSubject> load_partial_subjects(const fs::path& dir)
{
    std::vector<PartialSubject> out;
    for (const auto& c : list_cases(dir)) {
        PartialSubject s;
        s.id = c.filename().string();
        s.image = zscore_normalize(read_image(c / "image.msegvol"));
        if (fs::exists(c / "partial.msegvol")) {
            s.partial = read_labels(c / "partial.msegvol");
        } else if (fs::exists(c / "labels.msegvol") && fs::exists(c / "labels.map")) {
            s.partial = extract_partial(read_labels(c / "labels.msegvol"), LabelMap::read(c / "labels.map"));
        } else {
            throw std::runtime_error("case '" + c.string() + "' has no partial labels");
        }
        if (s.partial.dims != s.image.dims) {
            throw std::runtime_error("case '" + c.string() + "': label and image dims differ");
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<FullSubject> load_full_subjects(const fs::path& dir)
{
    std::vector<FullSubject> out;
    for (const auto& c : list_cases(dir)) {
        if (!fs::exists(c / "labels.msegvol") || !fs::exists(c / "labels.map")) {
            throw std::runtime_error("case '" + c.string() + "' lacks labels.msegvol or labels.map");
        }
        FullSubject s;
        s.id = c.filename().string();
        s.image = zscore_normalize(read_image(c / "image.msegvol"));
        s.full = read_labels(c / "labels.msegvol");
        s.map = LabelMap::read(c / "labels.map");
        if (s.full.dims != s.image.dims) {
            throw std::runtime_error("case '" + c.string() + "': label and image dims differ");
        }
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace mseg
