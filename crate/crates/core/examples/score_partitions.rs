//! Compare two partitions with the adjusted Rand index.

use spatial_fclust::metrics::{adjusted_rand_index, confusion};

fn main() -> spatial_fclust::Result<()> {
    let truth = [1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3];
    let renamed = [3, 3, 3, 3, 1, 1, 1, 1, 2, 2, 2, 2];
    let noisy = [1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 1, 3];

    println!(
        "renamed labels: ARI = {:.3}",
        adjusted_rand_index(&renamed, &truth)?
    );
    println!(
        "two sites moved: ARI = {:.3}",
        adjusted_rand_index(&noisy, &truth)?
    );

    let table = confusion(&noisy, &truth)?;
    print!("assigned\\truth");
    for c in &table.cols {
        print!("{c:>4}");
    }
    println!();
    for r in &table.rows {
        print!("{r:>14}");
        for c in &table.cols {
            print!("{:>4}", table.counts.get(&(*r, *c)).copied().unwrap_or(0));
        }
        println!();
    }
    Ok(())
}
