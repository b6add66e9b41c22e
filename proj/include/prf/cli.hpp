#pragma once

namespace prf {
int cli_main(int argc, char** argv);
}
