fn main() {
    std::process::exit(jointqr::study_harness::cli_main(std::env::args_os()));
}
