#pragma once

#include <string_view>

// Packaged text assets, embedded at build time from assets/ and data/.
namespace haloprobe::assets {

std::string_view system_prompt();
std::string_view editing_prompt();
std::string_view coco_synonyms();
std::string_view irregular_plurals();

}  // namespace haloprobe::assets
